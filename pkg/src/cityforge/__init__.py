"""Building-level 3D city generation from footprint priors."""

__version__ = "0.1.0"

FORMAT_VERSIONS = {"UVOX": 1, "ULAT": 1, "UFLW": 1, "UEMB": 1}
