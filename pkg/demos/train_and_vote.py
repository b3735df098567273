"""Train a small fusion model and vote window decisions into record labels.

Run with: python3 demos/train_and_vote.py   (about a minute)
"""

import tempfile
from pathlib import Path

from mmfuse.datamodel import load_manifest, preset_config
from mmfuse.evaluation import compute_metrics, predict_record, prefix_decision
from mmfuse.synthgen import SynthSpec, generate_dataset
from mmfuse.training import TrainConfig, load_checkpoint, restore_model, train

work = Path(tempfile.mkdtemp(prefix="mmfuse_train_"))

spec = SynthSpec(train_records=16, val_records=4, test_records=12,
                 min_duration=8.0, max_duration=14.0, cue_magnitude=2.0,
                 seed=1)
manifest = load_manifest(generate_dataset(spec, work / "data"),
                         preset_config("synth"))

config = TrainConfig(window_seconds=3.0, d=32, layers=1, heads=2,
                     dropout=0.0, epochs=30, batch_size=8, base_lr=0.003,
                     seed=0)
print(f"training d={config.d} model for {config.epochs} epochs...")
result = train(manifest, config, work / "run")
for row in result.history:
    if row.epoch % 5 == 0 or row.epoch == 1:
        print(f"  epoch {row.epoch:2d}  lr {row.lr:.5f}  "
              f"loss {row.train_loss:.4f}  val f1 {row.val_f1:.2f}")
print(f"best epoch {result.best_epoch} (val f1 {result.best_val_f1:.2f}), "
      f"checkpoints under {work / 'run'}")

model = config.build_model(preset_config("synth"))
restore_model(model, load_checkpoint(result.best_path))

# Each test record is split into sequential windows; the record decision is
# the majority label. Prefix decisions show how early the vote settles.
results = []
for record in manifest.records:
    if record.split != "test":
        continue
    res = predict_record(manifest.load_record(record), model,
                         config.window_seconds)
    results.append(res)
    early = prefix_decision(res, 1)
    print(f"  {res.record_id}: true {res.true_label} -> voted "
          f"{res.final_label} from {len(res.window_predictions)} windows "
          f"{res.vote_counts}, after one window {early}")

metrics = compute_metrics([r.final_label for r in results],
                          [r.true_label for r in results])
print(f"test precision {metrics.precision:.2f} recall {metrics.recall:.2f} "
      f"f1 {metrics.f1:.2f} accuracy {metrics.accuracy:.2f}")
