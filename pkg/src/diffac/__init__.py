"""Off-policy actor-critic with diffusion samplers for both the return
distribution and the policy, mixture-based entropy estimation and an
adaptive temperature."""

__version__ = "0.1.0"
