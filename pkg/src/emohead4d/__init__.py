"""Audio-driven, emotion-controllable 3D Gaussian talking heads."""
