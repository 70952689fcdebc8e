# EAFormer package
