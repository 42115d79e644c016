from hypothesis import HealthCheck, settings

# Numba-backed calls can be slow on first invocation (JIT); disable the
# per-example deadline and shrink the example budget accordingly.
settings.register_profile(
    "fusedkv",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("fusedkv")
