"""LR finder, one-cycle schedule and a short training run on phantoms.

Takes a few minutes on one CPU.
"""
import tempfile

import numpy as np

from rawbrain.evaluation import bias_report
from rawbrain.manifest import load_dataset
from rawbrain.models import build_resnet3d, init_state, predict
from rawbrain.phantom import PhantomParams, generate_dataset
from rawbrain.training import TrainConfig, epoch_losses, lr_find, one_cycle, train

man = generate_dataset(96, PhantomParams(), seed=0, out_dir=tempfile.mkdtemp())
data = load_dataset(man, "low")
tr, te = data.take(range(80)), data.take(range(80, 96))
print(tr.x.shape, te.x.shape)

spec = build_resnet3d("low")
state = init_state(spec, seed=0, output_bias=float(tr.ages.mean()))
cfg = TrainConfig(epochs=6, batch_size=16, lr_find_steps=40)

sweep = lr_find(spec, state, tr, cfg)  # state is left untouched
for lr, loss in list(zip(sweep.lrs, sweep.losses))[::5]:
    print(f"{lr:10.2e} {loss:10.2f}")
print("eta_max", sweep.eta_max)

total = cfg.epochs * (len(tr) // cfg.batch_size)
for step in (0, total // 4, total // 2, total - 1):
    lr, mom = one_cycle(step, total, cfg, sweep.eta_max)
    print(step, f"{lr:.2e}", f"{mom:.3f}")

ck = train(spec, state, tr, cfg)  # runs the finder itself when eta_max is unset
print(np.round(epoch_losses(ck), 1))

pred = predict(spec, ck.state, te.x)
print(bias_report(pred, te.ages, te.sexes).to_table("phantoms"))
