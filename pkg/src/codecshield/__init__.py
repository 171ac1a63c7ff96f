"""codecshield - codec resynthesis detection of adversarial audio against speaker verification"""

__version__ = "0.1.0"
