"""Train the prototype model on a small synthetic cohort and print accuracy by
clip separation. Takes well under a minute on one core.

    python3 demos/order_toy.py
"""
from breathorder.dataio import SynthParams, synth_dataset
from breathorder.encoder import ClipBank, EncoderConfig
from breathorder.evaluate import curve_from_report, evaluate
from breathorder.train import TrainConfig, all_pairs, split_by_participant, train_embedding

seqs = synth_dataset(SynthParams(M=12, seed=0), 40)
train_s, test_s = split_by_participant(seqs, 0.25, seed=0)
cfg = EncoderConfig.preset("toy", posenc_mode="ape", mgm_enabled=True)
bank = ClipBank.from_sequences(seqs, cfg)

res = train_embedding(train_s, cfg, TrainConfig(epochs=3, lr=2e-3, val_fraction=0.0), bank=bank)
for row in res.log.epochs:
    print(f"epoch {row['epoch']}: train loss {row['train_loss']:.4f}")

report = evaluate(res.predictor(bank), all_pairs(test_s))
print(f"test pairs {report.n_pairs}: accuracy {report.accuracy:.3f}, F1 {report.f1:.3f}")
curve = curve_from_report(report)
for d, n, a in zip(curve.deltas, curve.counts, curve.accuracy):
    print(f"  delta {d:>2}  n={n:<4} accuracy {a:.3f}")
print(f"Spearman(delta, accuracy) = {curve.spearman():.3f}")
