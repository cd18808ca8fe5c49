"""Binary lesion segmentation at desk scale: autodiff, losses, schedules, training and OoD-aware evaluation."""

__version__ = "0.1.0"
