# rdlab: desk-scale rate-distortion laboratory
__version__ = "0.1.0"
