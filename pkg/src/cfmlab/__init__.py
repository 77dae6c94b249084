"""cfmlab: desk-scale co-speech gesture generation.

Two-stage pipeline: residual-VQ motion codecs per body part (stage 1),
then a contrastive flow-matching generator over the fused latent space
conditioned on semantically aligned audio/text embeddings (stage 2).
Everything runs on CPU in float64 on procedurally generated data.
"""

__version__ = "0.1.0"
