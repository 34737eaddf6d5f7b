"""Low-light data enhancement for lane detection via unpaired style transfer."""

__version__ = "0.1.0"
