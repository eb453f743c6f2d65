"""Speech analysis, control, and generation with a masked autoencoder.

A waveform is described by two coupled token streams: vector-quantized mel
spectrogram tokens and six quantized speech attributes (phonetic content,
fundamental frequency, loudness, speaker, signal-to-noise ratio, and
clarity).  A bidirectional masked autoencoder trained to fill in either
stream from the other then serves as both an analyzer (mel in, attributes
out) and a controllable generator (attributes in, mel out), which enables
pitch shifting, denoising, and voice manipulation through attribute edits.
"""

__version__ = "0.1.0"
