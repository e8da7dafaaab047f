"""Train a tiny CNN, attack it, and reconstruct the attacks with TVM.

Prints clean, adversarial and TVM-reconstructed accuracy for the softmax
and WNLL heads. Takes a couple of minutes on one core.
Run: python3 demos/attack_and_defend.py
"""

import numpy as np

from wnll_lab import experiments as ex
from wnll_lab.training import TrainConfig


def main():
    config = ex.ExperimentConfig(
        data=ex.DataSpec(per_class_cap=200, test_per_class=50),
        train=TrainConfig(alternations=2, epochs_linear=5, epochs_wnll=2, lr=0.01, momentum=0.9, lr_milestones=()),
        attacks=("fgsm", "ifgsm"),
        epsilons=(0.0, 0.01, 0.03),
        output_dir="demo_out",
    )
    data = ex.load_data(config)
    config.checkpoints.update(ex.train_checkpoints(config, data[0]))
    report = ex.run_defense_sweep(config, data)
    print(f"{'attack':>6} {'head':>6} {'eps':>5} {'clean':>6} {'adv':>6} {'tvm':>6}")
    for r in report.rows:
        print(f"{r['attack']:>6} {r['head']:>6} {r['epsilon']:>5.2f} {r['clean_acc']:>6.3f} "
              f"{r['adv_acc']:>6.3f} {r['tvm_adv_acc']:>6.3f}")
    for path in ex.emit_report(report, config.output_dir, "sweep"):
        print("wrote", path)
    feats = ex.export_features(ex._load_model(config, "wnll", "original"), data[1])
    spread = [np.ptp(feats.values[feats.labels == c], axis=0).round(2).tolist() for c in (0, 1)]
    print("per-class PCA extent of test features:", spread)


if __name__ == "__main__":
    main()
