"""Early-late fusion of Jacobian-domain MRI/CT volumes for four-stage dementia classification."""
__version__ = "0.1.0"
