# Experiment scripts
