"""Smoke test for the moca extension module.

Build and install first, e.g. `pip install ./crates/python` or
`maturin develop -m crates/python/Cargo.toml`, then run this script.
"""

import json
import math
import os
import tempfile

import moca as mv


def main():
    sched = mv.NoiseSchedule()
    assert sched.timesteps == 1000
    assert 0.0 < sched.alpha_bar(1000) < 0.01
    assert mv.kappa_at(1000, 1000, 2.0) == 0.0 and mv.kappa_at(0, 1000, 2.0) == 2.0

    x0 = mv.Latent.gaussian((4, 8, 8), 1)
    oracle = mv.Denoiser.oracle(x0, sched)
    traj = mv.ddim_invert(x0, oracle, sched, 50)
    assert len(traj) == 51
    back = mv.ddim_sample(traj[-1], oracle, sched, 50)
    assert back.max_abs_diff(x0) < 1e-4

    cond = mv.reference_pattern(4, 8)
    assert mv.blend(x0, cond, mv.Mask.empty(8, 8), 2.0) == x0
    assert mv.blend(x0, cond, mv.Mask.full(8, 8), 2.0) == cond

    scene, gt = mv.moving_square_scene()
    masks, linked = mv.track_masks(scene, tau=0.5)
    assert all(mv.iou(a, b) >= 0.9 for a, b in zip(masks, gt)) and all(linked)

    assert abs(mv.cass(0.20, 0.50, 0.80, 0.60) - 0.50) < 1e-12
    assert abs(mv.rel_cass(0.20, 0.50, 0.80, 0.60) - 1.75) < 1e-12
    img = [((i * 7) % 32) / 31.0 for i in range(32 * 32)]
    assert abs(mv.ssim(img, img, 32, 32) - 1.0) < 1e-9

    config = json.loads(mv.normalize_config("{}"))
    config["schedule"]["timesteps"] = 64
    config["queue"] = {"length": 16, "frames": 16}
    config["injection"]["t_prime"] = 19
    frames, track, manifest = mv.run_mix(json.dumps(config), cond, source=scene)
    again, _, _ = mv.run_mix(json.dumps(config), cond, source=scene)
    assert len(frames) == 16 and len(track) == 16
    assert all(a == b for a, b in zip(frames, again))
    assert json.loads(manifest)["emitted_frames"] == 16
    assert all(math.isfinite(v) for v in frames[0].tolist())

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "frames.lts")
        mv.write_lts(path, frames)
        # LTS stores float32.
        loaded = mv.read_lts(path)
        assert all(a.max_abs_diff(b) < 1e-5 for a, b in zip(loaded, frames))
        mpath = os.path.join(d, "masks.lts")
        mv.write_masks(mpath, track)
        assert mv.read_masks(mpath) == track

    try:
        mv.normalize_config('{"injection": {"tau": 1.5}}')
    except ValueError as e:
        assert "tau" in str(e)
    else:
        raise AssertionError("tau=1.5 accepted")

    print("smoke test ok")


if __name__ == "__main__":
    main()
