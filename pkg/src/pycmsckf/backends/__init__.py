BACKENDS = {
    "full": "pycmsckf.backends.full.FullEstimator",
    "schmidt": "pycmsckf.backends.schmidt.SchmidtEstimator",
    "compressed": "pycmsckf.backends.compressed.CompressedEstimator",
}
