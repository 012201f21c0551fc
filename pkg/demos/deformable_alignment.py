"""Flow-guided deformable alignment from its initialisation.

At initialisation the alignment module reproduces the flow warp of every
pyramid level exactly. Perturbing one bias of the offset branch shows that
the learned offsets sit on top of the flow: with a deliberately wrong flow,
a constant offset correction recovers the right alignment.
"""

import numpy as np

from adaptalign.flow import FlowField, warp_tensor
from adaptalign.imageio import synth_sequence
from adaptalign.numerics import default_dtype
from adaptalign.tsmc import FgdParams, build_feature_pyramid, level_flows, tsmc_forward


def level_errors(res, target):
    return [float(np.mean((r.data - t.data) ** 2)) for r, t in zip(res.refined, target)]


def main():
    seq = synth_sequence("global_shift", {"dx": 2.0}, 2, 64, 64, seed=1)
    cur, ref = seq.frame(1).to_array(), seq.frame(0).to_array()
    with default_dtype(np.float64):
        params = FgdParams.init((8, 16, 24), seed=0)
        target = build_feature_pyramid(cur, params)

        right = FlowField.constant(64, 64, -2.0, 0.0)
        res = tsmc_forward(ref, right, params)
        coarse = [warp_tensor(p, f) for p, f in zip(res.pyramid, level_flows(right))]
        same = all(np.array_equal(a.data, b.data) for a, b in zip(res.refined, coarse))
        print(f"init output equals the per-level flow warp: {same}")
        print("MSE with the right flow   ", " ".join(f"{e:.3e}" for e in level_errors(res, target)))

        wrong = FlowField.constant(64, 64, -1.0, 0.0)
        print("MSE with a 1 px wrong flow", " ".join(f"{e:.3e}" for e in level_errors(tsmc_forward(ref, wrong, params), target)))

        # coarse x-offsets are every other channel of the hidden conv output
        lp = params.levels[0]
        lp.hidden_conv.bias.data[0:18:2] = -1.0
        fixed = tsmc_forward(ref, wrong, params)
        print(f"level-1 MSE after a -1 px offset correction: {level_errors(fixed, target)[0]:.3e}")


if __name__ == "__main__":
    main()
