"""Walk the network shape by shape and count its parameters."""
import numpy as np

from rawbrain.models import build_resnet3d, count_parameters

for res in ("high", "medium", "low"):
    spec = build_resnet3d(res)
    print(res, spec.grid, count_parameters(spec))  # 49,820,497 / 6,317,905 / 1,015,633

spec = build_resnet3d("high")
for name, shape in spec.shape_ladder():  # per-sample shapes, batch axis dropped
    print(f"{name:<14}{str(shape):>24}")

# only the first dense layer depends on the grid
shapes = spec.param_shapes()
print(shapes["head.fc1.weight"])  # (1553664, 32)
trunk = sum(int(np.prod(s)) for k, s in shapes.items() if not k.startswith("head.fc"))
print(trunk)  # 103,184 at every resolution
