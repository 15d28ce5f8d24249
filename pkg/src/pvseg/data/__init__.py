"""Dataset tooling: image containers, manifests, synthetic scenes, checkpoints."""
