# Numerical core: layer kernels, graph executor, optimizer, weight files
