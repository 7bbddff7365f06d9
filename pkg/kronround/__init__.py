# Numerical core: factorizations, rounding algorithms, Hessian sketches and bounds
