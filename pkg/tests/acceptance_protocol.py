"""Model sizes and iteration counts for the acceptance run (one CPU, two hours)."""
import os
from pathlib import Path

from ftddm.experiments import Protocol

WORKDIR = Path(os.environ.get("FTDDM_ACCEPTANCE_DIR", Path(__file__).resolve().parent.parent / ".acceptance"))

PROTOCOL = Protocol(
    subjects=16, data_seed=0, n_slices=6, size=64, seed=0, fold=0,
    iterations=3000, batch_size=8, lr=1e-4, T=1000, T_trunc=100, val_every=250, val_images=32,
    denoiser=dict(channels=(16, 24, 32), blocks_per_stage=1, attention_resolutions=(16, 8), attention_heads=4,
                  time_embed_dim=32, embed_width=64),
    flow=dict(scales=2, steps_per_scale=4, hidden=32, cond_channels=16),
)

# Flow trained with no diffusion part, for the flow-only end of the truncation range.
FLOW_ONLY_ITERATIONS = 300

# criterion number -> (passed, detail); filled by test_acceptance, printed by conftest
RESULTS = {}


def report(number, passed, detail):
    RESULTS[number] = (bool(passed), detail)
    line = f"ACCEPTANCE {number:2d} {'PASS' if passed else 'FAIL'}: {detail}"
    print(line, flush=True)
    return line
