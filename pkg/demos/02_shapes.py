"""
Token counts and parameter budgets
==================================

Patch size decides the sequence length; the custom head flattens the
whole sequence, so it dominates the parameter count for /16 models.
"""

from vitderm.model import ViTModel, make_config, param_count

print(f"{'config':<6} {'tokens':>6} {'head input':>11} {'backbone':>12} {'total':>12}")
for name in ("B16", "B32", "L16", "L32", "tiny"):
    cfg = make_config(name)
    print(f"{name:<6} {cfg.seq_len:>6} {cfg.head_input_dim:>11} "
          f"{param_count(cfg, include_head=False):>12,} {param_count(cfg):>12,}")

# the closed form agrees with counting a live (zero-filled) model
tiny = make_config("tiny")
print("tiny live count:", ViTModel.zeros(tiny).num_parameters(), "==", param_count(tiny))

# pooling on the class token instead of flattening shrinks the head
cls = make_config("L16", head_input="cls")
print(f"L16 with class-token head: {param_count(cls):,} parameters")
