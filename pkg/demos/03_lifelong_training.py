"""Train through a domain sequence and watch forgetting.

Three methods see the same four domains in order. finetune trains on the new
domain only. replay_only mixes replay samples into each batch and distils the
previous model's descriptors on them. lifelongpr first tunes a small prompt
network on replay data with the backbone frozen, then fine-tunes the backbone
with the prompt frozen.

This is one seed of the desk-scale setting used by the acceptance suite
(400 training submaps per domain, 256 points, 10 epochs per stage, 64 replay
slots). It takes about three minutes on one CPU core. Single seeds are noisy;
the suite averages five.

Run:  python3 demos/03_lifelong_training.py
"""

from lifelongpr.data import SequenceSpec, desk_profiles, generate_sequence
from lifelongpr.metrics import format_table, summarize
from lifelongpr.trainer import StageConfig, run_sequence

domains = generate_sequence(SequenceSpec(desk_profiles(), seed=0, n_points=256))

results = {}
for method in ("finetune", "replay_only", "lifelongpr"):
    cfg = StageConfig(method=method)
    rec = run_sequence(domains, cfg, seed=0)
    results[method] = summarize(rec.matrix)
    print(f"\n== {method}\n{format_table(rec.matrix)}")

print("\nmethod        F(%)   final mIR@1(%)")
for m, s in results.items():
    print(f"{m:12s} {100 * s['F']:5.1f}   {100 * s['mIR@1'][str(s['T'])]:5.1f}")
