"""Small float64 autodiff engine and the networks built on it."""
