"""Desk-scale attack: composed trigger versus a random sign pattern.

Runs the default desk configuration for one seed with both trigger kinds
(sharing cached stages), then prints the attack goals, the condition
proxies and the split of the composed trigger's success between its
adversarial corner and its shortcut region.  About a minute on one core.

    python demos/desk_attack.py [OUT_DIR] [SEED]
"""
import sys
from pathlib import Path

from plab.experiment import RunConfig, run_pipeline

out = Path(sys.argv[1] if len(sys.argv) > 1 else "desk_demo")
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
cfg = RunConfig().with_seed_overrides({"all": seed})

ours = run_pipeline(cfg, out / "ours")
rn = run_pipeline(cfg.replace(**{"trigger.kind": "rn_linf"}), out / "rn_linf",
                  cache_dirs=[out / "ours"])

print(f"{'':22s}{'ours':>10s}{'rn_linf':>10s}")
for key in ("asr", "clean_acc", "target_acc", "epsilon_c1", "similarity_k", "tau_c3", "v_sc"):
    print(f"{key:22s}{ours.condition[key]:10.4f}{rn.condition[key]:10.4f}")
print(f"{'control clean_acc':22s}{ours.data['control']['clean_acc']:10.4f}")
print(f"{'control asr':22s}{ours.data['control']['asr']:10.4f}{rn.data['control']['asr']:10.4f}")
for key, val in ours.data["diagnostics"].items():
    print(f"  {key:30s}{val:.4f}")
print("clean bound:", round(ours.data["bounds"]["clean"]["total"], 4))
