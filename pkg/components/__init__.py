"""Valley Atlas components: models, Monte Carlo kernels, valley analysis and pipeline stages."""
