# Compiled kernels live here when the extension builds; amrtok.kernels
# falls back to the numpy implementation when it does not.
