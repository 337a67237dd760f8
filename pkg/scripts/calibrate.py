"""Calibration run for the directional-replication settings.

Trains single vs triple placements over 3 seeds and prints the probe
metrics the acceptance thresholds depend on. Not part of the test suite.
"""

import sys
import time

import numpy as np

from mplbench.corpus import CorpusSpec, generate_corpus
from mplbench.labeler import build_ca1
from mplbench.encoder import EncoderConfig
from mplbench.objective import plan_single, plan_triple
from mplbench.pretrain import TrainConfig, pretrain
from mplbench.probe import (ProbeTask, ProbeConfig, train_probe,
                            weight_center_of_mass, weight_entropy)

STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 800
PROBE_STEPS = int(sys.argv[2]) if len(sys.argv) > 2 else 500
SIZES = [64, 48, 32]

t_start = time.time()
for seed in (0, 1, 2):
    spec = CorpusSpec(seed=seed)
    corpus = generate_corpus(spec)
    bundle = build_ca1(corpus, SIZES, 0.5, seed)
    enc = EncoderConfig(num_layers=6, model_dim=32, num_heads=4, ffn_dim=64,
                        input_dim=24, max_frames=spec.max_frames(), seed=seed)
    tc = TrainConfig(steps=STEPS, warmup_steps=STEPS // 10, log_every=100, seed=seed)
    plans = {
        "single": plan_single(6, 32),
        "triple033": plan_triple(0.33, 6, SIZES),
        "triple066": plan_triple(0.66, 6, SIZES),
    }
    for name, plan in plans.items():
        t0 = time.time()
        state, log = pretrain(corpus, bundle, enc, plan, tc)
        t_train = time.time() - t0
        pcfg = ProbeConfig(steps=PROBE_STEPS, learning_rate=5e-3, seed=seed)
        rc = train_probe(state.model(), ProbeTask("frame_content", spec.num_content_units),
                         corpus, pcfg)
        rs = train_probe(state.model(), ProbeTask("utterance_speaker", spec.num_speakers),
                         corpus, pcfg)
        print(f"seed={seed} {name:10s} train={t_train:5.1f}s "
              f"loss0={log[0]['total']:.3f} lossN={log[-1]['total']:.3f} "
              f"content_acc={rc.metric:.4f} content_H={weight_entropy(rc.layer_weights):.4f} "
              f"content_com={weight_center_of_mass(rc.layer_weights):.4f} "
              f"spk_acc={rs.metric:.4f} spk_com={weight_center_of_mass(rs.layer_weights):.4f}",
              flush=True)
print(f"total {time.time() - t_start:.1f}s")
