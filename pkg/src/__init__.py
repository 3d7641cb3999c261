# ReconUQ - dose-prediction uncertainty workbench
