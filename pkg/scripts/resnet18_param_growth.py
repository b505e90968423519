"""Print per-task parameter growth of the ResNet18 layout (no training, random weights)."""

import argparse

from tsbn.model import Backbone, IncrementalModel, parameter_report, task_param_count


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--tasks", type=int, default=10)
    p.add_argument("--classes-per-task", type=int, default=10)
    args = p.parse_args()
    bb = Backbone("resnet18", 3, seed=0)
    bb.freeze()
    model = IncrementalModel(bb)
    print(f"frozen conv parameters: {sum(p.size for p in bb.conv_params):,}")
    print(f"BN sites: {len(bb.bn_channels)}, gamma+beta per bank: {2 * sum(bb.bn_channels):,}")
    print(f"analytic growth per task: {task_param_count(bb.bn_channels, bb.feature_dim, args.classes_per_task):,}")
    print("task  task-specific  total")
    for t in range(args.tasks):
        model.add_task(args.classes_per_task)
        rep = parameter_report(model)
        print(f"{t + 1:4d}  {rep['trainable']:13,d}  {rep['total']:,}")


if __name__ == "__main__":
    main()
