"""Train the toy-scale acceptance model (FULL loss, 20k iterations) with resume support."""
import sys
from pathlib import Path

from vdir.corpus import toy_corpus
from vdir.trainer import TrainConfig, train

ablation = sys.argv[1] if len(sys.argv) > 1 else "full"
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
iters = int(sys.argv[3]) if len(sys.argv) > 3 else 20_000
run = Path(sys.argv[4] if len(sys.argv) > 4 else f"runs/toy_{ablation}_seed{seed}")
cfg = TrainConfig.preset("toy", ablation=ablation, seed=seed, max_iters=iters,
                         log_every=10, checkpoint_every=1000)
train_imgs, _ = toy_corpus()
last = run / "ckpt_last.safetensors"
ckpts = sorted(run.glob("ckpt_[0-9]*.safetensors"), key=lambda p: int(p.stem.split("_")[1]))
resume = ckpts[-1] if ckpts else None
if resume is not None and run.joinpath("log.jsonl").exists():
    # drop log lines written after the checkpoint we resume from
    it = int(resume.stem.split("_")[1])
    lines = [l for l in run.joinpath("log.jsonl").read_text().splitlines() if l and int(l.split(",")[0].split(":")[1]) <= it]
    run.joinpath("log.jsonl").write_text("".join(l + "\n" for l in lines))
train(cfg, train_imgs, run_dir=run, resume_from=resume, log_stream=None)
