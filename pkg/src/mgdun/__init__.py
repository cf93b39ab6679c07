"""Model-guided unfolding for guided MRI super-resolution, on a small numpy autodiff core."""

__version__ = "0.1.0"
