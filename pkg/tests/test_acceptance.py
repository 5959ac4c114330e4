"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""
import math
import time

import numpy as np

from egoplan.bevgrid import BevGrid, GridSpec, ReferenceLine, distance_map, geo_normalize, response_target
from egoplan.cli import main
from egoplan.denoise import NoiseSpec, diffuse_positions, noise_trajectory, trajectory_noise_scale
from egoplan.evalkit import (MethodRow, ObbPose, aggregate_report, clearance_scenario, collision_rate_grid,
                             collision_rate_obb, divergence_scenario, obb_overlap)
from egoplan.interaction import (LayerParams, QueryEmbedding, ScoreBreakdown, SelectionParams,
                                 SelectionSchedule, coarse_to_fine_select, dual_interaction_layer,
                                 ego_query, fuse_scores, rank_top_k)
from egoplan.netlet import (IntentEncoder, ResponseRegressor, SEBlock, TrainConfig, evaluate_response,
                            grad_check, init_intent_nets, intent_inputs, position_embedding,
                            train_response)
from egoplan.planner import PipelineParams, RefineConfig, iterate_refine
from egoplan.scene import TEMPLATES, AnchorBox, Command, EgoIntent, Trajectory, gen_scenario

from acceptance_log import record
from oracles import boxes_overlap_sampled, fused_score, min_dist_brute


def test_report_arithmetic():
    t0 = time.perf_counter()
    uniad = MethodRow("UniAD", (0.48, 0.96, 1.65), (0.05, 0.17, 0.71))
    ours = MethodRow("DiFSD-S", (0.16, 0.33, 0.59), (0.00, 0.04, 0.18))
    _, rep = aggregate_report([uniad, ours])
    base = aggregate_report([uniad])[0]
    ok = (abs(base.l2_avg - 1.03) <= 1e-9 and abs(rep.l2_avg - 0.36) <= 1e-9
          and abs(base.collision_avg - 0.31) <= 1e-9 and abs(rep.collision_avg - 0.22 / 3) <= 1e-9
          and abs(rep.l2_improvement - 0.66) <= 0.01 and abs(rep.collision_improvement - 0.77) <= 0.02)
    detail = (f"L2 {base.l2_avg:.2f} vs {rep.l2_avg:.3f} -> {100 * rep.l2_improvement:.2f}%, "
              f"collision {base.collision_avg:.2f} vs {rep.collision_avg:.4f} -> "
              f"{100 * rep.collision_improvement:.2f}%")
    assert record("report arithmetic", ok, detail, time.perf_counter() - t0, 1)


def test_geometric_anchor():
    t0 = time.perf_counter()
    spec = GridSpec()
    centers = spec.centers()
    rng = np.random.default_rng(2024)
    worst = 0.0
    n = 0
    for _ in range(100):
        wp = np.column_stack([rng.uniform(-35, 35, 6), rng.uniform(-20, 20, 6)])
        m_r = response_target(spec, wp)
        for _ in range(100):
            i, j = int(rng.integers(spec.H)), int(rng.integers(spec.W))
            want = max(0.0, 1.0 - min_dist_brute(centers[i, j], wp) / 30.0)
            worst = max(worst, abs(m_r.values[i, j] - want))
            n += 1
    anchor = geo_normalize(3.0)
    ok = anchor == 0.9 and worst <= 1e-12 and n == 10_000
    assert record("geometric anchor", ok, f"geo_normalize(3)={anchor!r}, max |diff| {worst:.2e} over {n} pairs",
                  time.perf_counter() - t0, 10)


def test_collision_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    disagree = band = 0
    for _ in range(1000):
        a = ObbPose(0.0, 0.0, rng.uniform(-math.pi, math.pi), rng.uniform(0.2, 3.0), rng.uniform(0.2, 1.5))
        hl, hw = rng.uniform(0.2, 3.0), rng.uniform(0.2, 1.5)
        # centre distances concentrated around contact so both outcomes occur
        reach = math.hypot(a.half_length, a.half_width) + math.hypot(hl, hw)
        ang = rng.uniform(-math.pi, math.pi)
        r = rng.uniform(0.3, 1.1) * reach
        b = ObbPose(r * math.cos(ang), r * math.sin(ang), rng.uniform(-math.pi, math.pi), hl, hw)
        lo = boxes_overlap_sampled(a.row(), b.row(), 10_000, -1e-3)
        hi = boxes_overlap_sampled(a.row(), b.row(), 10_000, 1e-3)
        if lo != hi:
            band += 1
            continue
        disagree += obb_overlap(a, b) != lo
    ok = disagree == 0
    assert record("collision oracle", ok, f"{disagree} disagreements on {1000 - band} pairs ({band} in 1 mm band)",
                  time.perf_counter() - t0, 30)


def test_protocol_divergence():
    t0 = time.perf_counter()
    div = [divergence_scenario(k) for k in range(20)]
    plans, sets = [p for _, p in div], [s.agents for s, _ in div]
    g, o = collision_rate_grid(plans, sets), collision_rate_obb(plans, sets)
    clear = [clearance_scenario(k) for k in range(20)]
    cp, cs = [p for _, p in clear], [s.agents for s, _ in clear]
    cg, co = collision_rate_grid(cp, cs), collision_rate_obb(cp, cs)
    agree = sum(a == b for a, b in zip(cg.first, co.first))
    ok = g.rates[2] > o.rates[2] and agree == len(clear)
    detail = (f"divergence grid {g.rates[2]:.0f}% vs obb {o.rates[2]:.0f}% at 3 s; "
              f"clearance agreement {agree}/{len(clear)}")
    assert record("protocol divergence", ok, detail, time.perf_counter() - t0, 30)


def _query_set(rng, C):
    n = int(rng.integers(5, 60))
    ids = rng.permutation(np.arange(1, 10 * n))[:n]
    return [QueryEmbedding(rng.normal(size=C), (rng.uniform(-29, 29), rng.choice([-1, 1]) * rng.uniform(0.5, 14.5)),
                           float(rng.uniform(0.05, 1.0)), "agent", int(i)) for i in ids]


def _oracle_logits(ego, objs, cross):
    """Attention logits written out from the raw layer weights."""
    C = ego.feature.shape[0]
    lq, lk = cross.query.layers[0], cross.key.layers[0]
    e_row = np.concatenate([ego.feature, position_embedding(np.array([ego.position]), C)[0]])
    q = lq.weight @ e_row + lq.bias
    feats = np.array([o.feature for o in objs])
    rows = np.hstack([feats, position_embedding(np.array([o.position for o in objs]), C)])
    keys = rows @ lk.weight.T + lk.bias
    return list(keys @ q / math.sqrt(lk.weight.shape[0]))


def test_fused_score_properties():
    t0 = time.perf_counter()
    C = 16
    xs = np.arange(-29.75, 30, 0.5)
    m_d = distance_map(ReferenceLine(tuple(range(len(xs))), np.c_[xs, np.zeros_like(xs)]), GridSpec())
    worst, invariant_fail = 0.0, 0
    for s in range(1000):
        rng = np.random.default_rng(s)
        lp = LayerParams.init(C, rng)
        objs = _query_set(rng, C)
        ego = ego_query(rng.normal(size=C))
        _, _, scores = dual_interaction_layer(ego, objs, m_d, lp)
        geo = [max(0.0, 1 - abs(o.position[1]) / 30.0) for o in objs]
        want = fused_score(_oracle_logits(ego, objs, lp.cross), geo, [o.confidence for o in objs])
        worst = max(worst, max(abs(a.s_inter - b) for a, b in zip(scores, want)))
        k = max(1, len(objs) // 4)
        kept = {scores[i].source_id for i in rank_top_k(scores, k)}
        for f in ("s_attn", "s_geo", "s_cls"):
            c = float(rng.uniform(0.1, 1.0))
            scaled = []
            for sc in scores:
                v = dict(s_attn=sc.s_attn, s_geo=sc.s_geo, s_cls=sc.s_cls)
                v[f] *= c
                scaled.append(ScoreBreakdown(sc.source_id, **v, s_inter=fuse_scores(*v.values())))
            invariant_fail += {scaled[i].source_id for i in rank_top_k(scaled, k)} != kept
        if s % 10 == 0:
            # full selection: permuted input and a uniformly scaled confidence keep the same set
            params = SelectionParams(agent_layers=[lp], map_layers=[lp])
            sched = SelectionSchedule((0.25,), (0.25,))
            base = coarse_to_fine_select(ego, objs, [], m_d, sched, params).agent_ids
            perm = [objs[i] for i in rng.permutation(len(objs))]
            half = [QueryEmbedding(o.feature, o.position, o.confidence * 0.5, o.kind, o.source_id) for o in objs]
            for variant in (perm, half):
                invariant_fail += set(coarse_to_fine_select(ego, variant, [], m_d, sched, params).agent_ids) != set(base)
    ok = worst <= 1e-9 and invariant_fail == 0
    assert record("fused score", ok, f"max oracle diff {worst:.2e} on 1000 sets, {invariant_fail} invariance failures",
                  time.perf_counter() - t0, 30)


def test_selection_cardinality():
    t0 = time.perf_counter()
    C = 16
    counts = []
    params = SelectionParams.init(C, 3, 0)
    m_d = BevGrid(GridSpec(), np.full(GridSpec().shape, 0.8))
    for seed in range(5):
        rng = np.random.default_rng(seed)
        objs = [QueryEmbedding(rng.normal(size=C), (rng.uniform(-30, 30), rng.uniform(-15, 15)),
                               float(rng.uniform(0.05, 1)), "agent", i) for i in range(900)]
        res = coarse_to_fine_select(ego_query(rng.normal(size=C)), objs, [], m_d, SelectionSchedule(), params)
        counts.append(len(res.agent_ids))
    ok = all(c == 18 for c in counts)
    assert record("selection cardinality", ok, f"survivors per seed {counts}", time.perf_counter() - t0, 10)


def test_refinement_trend():
    t0 = time.perf_counter()
    params = PipelineParams.init(16, 3, 0)
    tpls = ["cut_in", "intersection_left", "intersection_right"]
    better = 0
    plans1, plans2, sets = [], [], []
    for k in range(100):
        s = gen_scenario(tpls[k % 3], k)
        one = iterate_refine(s, RefineConfig(N=1), params)
        two = iterate_refine(s, RefineConfig(N=2), params)
        better += two.stages[1].result.after.total <= two.stages[0].result.after.total
        plans1.append(one.final)
        plans2.append(two.final)
        sets.append(s.agents)
    c1 = sum(f is not None for f in collision_rate_obb(plans1, sets).first)
    c2 = sum(f is not None for f in collision_rate_obb(plans2, sets).first)
    ok = better >= 95 and c2 <= c1
    assert record("refinement trend", ok, f"stage-2 cost <= stage-1 in {better}/100, collisions N=1 {c1}, N=2 {c2}",
                  time.perf_counter() - t0, 300)


def test_denoise_ranges():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    boxes = [AnchorBox(*rng.uniform(-20, 20, 3), math.log(4.5), math.log(1.9), math.log(1.6),
                       math.sin(y), math.cos(y), *rng.uniform(-5, 5, 3)) for y in rng.uniform(-3, 3, 1000)]
    spec = NoiseSpec()
    active = spec.scales > 0
    draws = pos_bad = neg_bad = 0
    seed = 0
    while draws < 100_000:
        grp = diffuse_positions(boxes, spec, seed)
        pos_bad += int(np.sum(np.any(np.abs(grp.pos_offsets) > spec.scales, axis=-1)))
        mag = np.abs(grp.neg_offsets[..., active])
        in_annulus = (mag > spec.scales[active]) & (mag <= 2 * spec.scales[active])
        neg_bad += int(np.sum(~np.any(in_annulus, axis=-1)))
        for g in range(grp.G):
            got = np.array([[b.x, b.y] for b in grp.positives[g]])
            ref = np.array([[b.x, b.y] for b in boxes])
            pos_bad += int(np.sum(np.any(np.abs(got - ref) > spec.scales[:2] + 1e-9, axis=1)))
        draws += grp.G * grp.K
        seed += 1
    gt = gen_scenario("cut_in", 3).ego_gt_future
    big = Trajectory(gt.waypoints * 2.0)
    s1, s2 = trajectory_noise_scale(gt), trajectory_noise_scale(big)
    off_ok = all(np.max(np.abs(n.waypoints - big.waypoints)) <= s2 for n in noise_trajectory(big, 3, 1))
    ok = pos_bad == 0 and neg_bad == 0 and s2 == 2 * s1 and off_ok
    detail = f"{draws} draws, {pos_bad} positive and {neg_bad} negative violations; FD bound {s1:.4f} -> {s2:.4f}"
    assert record("denoise ranges", ok, detail, time.perf_counter() - t0, 30)


def test_gradient_integrity():
    t0 = time.perf_counter()
    small = GridSpec((-3.0, 3.0), (-2.0, 2.0), 1.0)
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        enc = IntentEncoder(init_intent_nets(16, rng))
        intents = [EgoIntent(rng.uniform(0, 15), rng.uniform(-2, 2), rng.uniform(-0.3, 0.3),
                             Command(int(rng.integers(3)))) for _ in range(4)]
        u = [np.stack(col) for col in zip(*(intent_inputs(i) for i in intents))]
        worst = max(worst, grad_check(enc, u, seed=seed))
        blk = SEBlock.init(16, 4, rng)
        worst = max(worst, grad_check(blk, rng.normal(size=(2, 12, 16)), seed=seed))
        model = ResponseRegressor.init(8, 4, rng)
        worst = max(worst, grad_check(model, model.inputs(intents[:2], small), seed=seed))
    assert record("gradient integrity", worst <= 1e-4, f"max relative error {worst:.2e} over 20 seeds",
                  time.perf_counter() - t0, 30)


def _scenarios(n, offset):
    names = sorted(TEMPLATES)
    return [gen_scenario(names[i % len(names)], offset + i) for i in range(n)]


def test_learning_sanity():
    t0 = time.perf_counter()
    spec = GridSpec()
    cfg = TrainConfig(C=16, steps=2000, seed=0)
    train = _scenarios(20, 0)
    model, curve = train_response(train, spec, cfg)
    _, again = train_response(train, spec, cfg)
    held = evaluate_response(model, _scenarios(10, 10_000), spec)
    ok = held.l2 <= 0.05 and curve[-1].total < curve[0].total and curve == again
    detail = (f"held-out l2 {held.l2:.4f}, total {curve[0].total:.4f} -> {curve[-1].total:.4f}, "
              f"repeat identical {curve == again}")
    assert record("learning sanity", ok, detail, time.perf_counter() - t0, 300)


def test_run_determinism(tmp_path):
    t0 = time.perf_counter()
    tpls = ["cut_in", "intersection_left", "straight_traffic", "ped_crossing", "empty"]
    for t in tpls:
        assert main(["gen", t, "10", "--seed", "100", "--out", str(tmp_path / "scen")]) == 0
    for w in (1, 8):
        assert main(["run", str(tmp_path / "scen"), "--workers", str(w), "--out", str(tmp_path / f"w{w}")]) == 0
    a = sorted((tmp_path / "w1").glob("*.plan.json"))
    same = sum(p.read_bytes() == (tmp_path / "w8" / p.name).read_bytes() for p in a)
    ok = len(a) == 50 and same == 50
    assert record("run determinism", ok, f"{same}/{len(a)} plan files byte-identical at 1 vs 8 workers",
                  time.perf_counter() - t0, 300)
