"""Render one synthetic left turn, build its prompt, and ask the mock annotator.

Writes left_turn.png and left_turn_prompt.txt into the output directory
(default: ./demo_out) and prints the context the mock returns.
"""
import sys
from pathlib import Path

import numpy as np

from trafficctx.llm import NoiseConfig, format_context, mock_oracle
from trafficctx.prompt import build_tcgp, load_template
from trafficctx.scenario import AgentType
from trafficctx.synth import synth_scenario

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

scenario, truth = synth_scenario("demo", "left_turn", np.random.default_rng(42), AgentType.VEHICLE, 1, n_neighbors=5)
tcgp = build_tcgp(scenario, load_template())
(out / "left_turn.png").write_bytes(tcgp.image.to_png())
(out / "left_turn_prompt.txt").write_text(tcgp.text, encoding="utf-8")
print(f"image {tcgp.image.width}x{tcgp.image.height}, prompt {len(tcgp.text)} chars, ground truth {truth.word}")

# a noiseless mock answers with the ground truth; a noisy one sometimes does not
for noise in (0.0, 1.0):
    ctx = mock_oracle(scenario, NoiseConfig(noise=noise, seed=3))
    print(f"\nmock reply at noise {noise}:")
    print(format_context(ctx))
