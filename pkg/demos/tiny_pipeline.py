"""Generate a small synthetic dataset, train a small recognizer for a few
epochs, then evaluate it and print its compute report.

The model is far too small and briefly trained to recognize anything; the
point is to show every stage of the pipeline in under a minute.
"""

import tempfile
from pathlib import Path

from tcnet import cli
from tcnet.config import RunConfig
from tcnet.train import read_metrics, train

work = Path(tempfile.mkdtemp(prefix="tcnet_demo_"))
cfg = RunConfig(data_dir=str(work / "data"), out_dir=str(work / "run")).with_overrides(
    {
        "train_episodes": 16,
        "dev_episodes": 4,
        "channels": (8, 16, 16),
        "block_stages": (3,),
        "horizon": 4,
        "hidden": 16,
        "layers": 1,
        "epochs": 3,
        "lr": 3e-3,
        "milestones": (2,),
    }
)

cli.cmd_gen_data(cfg, log=print)
result = train(cfg, log=print)
for row in read_metrics(result.out_dir / "metrics.csv"):
    print(f"epoch {row['epoch']}: ctc {float(row['loss_ctc']):.3f}  gate density {float(row['gate_density']):.3f}")

report = cli.cmd_eval(cfg, str(result.out_dir / "last.ckpt"), log=print)
print(f"dev WER {report.wer:.3f}")
cli.cmd_flops(cfg, density=result.final.gate_density, log=print)
