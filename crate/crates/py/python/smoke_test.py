"""Smoke test for the `jigsaw` extension module.

Build and install first, e.g. `maturin develop --release` from crates/py,
then run `python python/smoke_test.py`.
"""

import json
import os
import tempfile

import jigsaw


def main():
    house = jigsaw.generate_house(3, n_rooms=4)
    house.validate()
    assert house.num_rooms == 4
    assert jigsaw.House.from_json(house.to_json()).gt_poses == house.gt_poses
    gt = house.gt_poses
    assert jigsaw.mpe(gt, gt) == 0.0
    assert jigsaw.ged(house, gt) == 0
    shifted = [(x + 3.0, y + 4.0, k) for x, y, k in gt]
    assert abs(jigsaw.mpe(shifted, gt) - 5.0) < 1e-12

    svg = house.render_svg()
    assert svg.startswith("<svg") and 'viewBox="0 0 256 256"' in svg
    assert house.corrupted(drop_doors=True).door_adjacency() == []

    sched = jigsaw.NoiseSchedule(100)
    x0 = [[0.1, -0.2], [0.3, 0.4]]
    noise = [[1.0, 0.5], [-0.5, 2.0]]
    back = sched.estimate_x0(sched.q_sample(x0, 37, noise), 37, noise)
    assert max(abs(a - b) for ra, rb in zip(back, x0) for a, b in zip(ra, rb)) < 1e-9

    houses = jigsaw.generate_dataset(4, seed=1, min_rooms=3, max_rooms=4)
    model = jigsaw.Model("diffusion", "gt_given", d_model=16, n_blocks=1, n_heads=2, steps=10, seed=0)
    losses = model.fit(houses, epochs=2, lr=1e-3, batch_size=2)
    assert len(losses) == 2
    summary = json.loads(model.evaluate(houses, runs=2, seed=0))
    assert summary["n_runs"] == 2 and summary["mpe_std"] >= 0.0
    assert len(model.estimate(houses[0])) == houses[0].num_rooms

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        again = jigsaw.Model.load(path)
        assert again.estimate(houses[0], seed=5) == model.estimate(houses[0], seed=5)
        data = os.path.join(d, "h.jsonl")
        jigsaw.write_jsonl(data, houses)
        assert [h.id for h in jigsaw.read_jsonl(data)] == [h.id for h in houses]

    try:
        jigsaw.generate_house(0, n_rooms=1)
    except jigsaw.JigsawError:
        pass
    else:
        raise AssertionError("expected JigsawError")

    print("smoke test ok:", house)


if __name__ == "__main__":
    main()
