"""Acceptance suite: one test per headline criterion.

Each test carries ``@criterion(...)``; conftest prints a PASS/FAIL line per
criterion at the end of the run. Also runnable directly:

    python tests/test_acceptance.py
"""

import io
import socket
import sys
import threading
import time
from fractions import Fraction

import numpy as np
import pytest

from fedsim import experiment
from fedsim.detmetrics import (Box, Detection, average_precision, evaluate_scenes, f1_score, iou,
                               match_detections, mean_average_precision, nms)
from fedsim.experiment import ExperimentConfig
from fedsim.fedavg import Client, ClientUpdate, GlobalModel, aggregate, finish_round, client_update
from fedsim.model import (LabeledDataset, ParamVector, TrainConfig, classifier_layout, gradient,
                          init_params, local_train, loss)
from fedsim.session import ServerConfig, client_session, server_session
from fedsim.wire import (DTYPE_F64, FrameError, GlobalModelMsg, LocalUpdateMsg, MsgType,
                         WireError, decode_client_id, frame, read_frame)
from oracles import brute_force_eval, random_scene

criterion = pytest.mark.criterion


def _elapsed_below(t0, limit):
    took = time.perf_counter() - t0
    assert took < limit, f"took {took:.2f}s, limit {limit}s"


# ---------------------------------------------------------------------------

def _weighted_mean_oracle(vals, n_ks):
    # exact rational sum(n_k * x_k) / n, rounded once; independent of aggregate's offset form
    n = sum(n_ks)
    return np.array([float(sum(Fraction(nk) * Fraction(float(v[j])) for nk, v in zip(n_ks, vals)) / n)
                     for j in range(len(vals[0]))])


@criterion("FedAvg oracle equivalence")
def test_fedavg_oracle_equivalence():
    rng = np.random.default_rng(20240501)
    cases = []
    for _ in range(200):
        k = int(rng.integers(1, 8))
        size = int(rng.integers(1, 51))
        vals = [rng.normal(scale=rng.choice([1e-3, 1.0, 1e3]), size=size) for _ in range(k)]
        n_ks = [int(v) for v in rng.integers(1, 1001, size=k)]
        cases.append((vals, n_ks, _weighted_mean_oracle(vals, n_ks)))
    layout = lambda size: (("w", (size,)),)  # noqa: E731
    t0 = time.perf_counter()
    results = [aggregate([ClientUpdate(i, nk, ParamVector(layout(len(v)), v))
                          for i, (v, nk) in enumerate(zip(vals, n_ks))]).values
               for vals, n_ks, _ in cases]
    _elapsed_below(t0, 1.0)
    worst = max(float(np.max(np.abs(got - ref))) for got, (_, _, ref) in zip(results, cases))
    assert worst <= 1e-12, worst


@criterion("Single-client equivalence")
def test_single_client_equals_centralized_sgd():
    cfg = ExperimentConfig(clients=1, local_epochs=1, target_metric=1.0, max_rounds=20,
                           dataset_size=500, eval_size=200, seed=17)
    t0 = time.perf_counter()
    fed = experiment.simulate(cfg)
    setup = experiment.build(cfg)
    # centralized oracle: consecutive local_train calls on the full set with the same seeds
    from fedsim.fedavg import round_config
    params = setup.initial
    for r in range(1, 21):
        params, _ = local_train(params, setup.train, round_config(cfg.train_config(), 0, r))
    _elapsed_below(t0, 5.0)
    assert fed.rounds == 20
    assert fed.final.params == params
    assert np.array_equal(fed.final.params.values, params.values)


@criterion("Consensus idempotence")
def test_consensus_idempotence():
    setup = experiment.build(ExperimentConfig(dataset_size=400, eval_size=100, seed=3))
    shard = setup.train.subset(np.arange(150))
    cfg = TrainConfig(2, 4, 0.01, seed=99)
    clients = [Client(k, shard, cfg, seed_key=0) for k in range(5)]
    g = GlobalModel(0, setup.initial, 0.0)
    for _ in range(10):
        ups = [client_update(c, g) for c in clients]
        g, _ = finish_round(g, ups, setup.eval_set)
        for u in ups:
            assert np.array_equal(g.params.values, u.params.values)
    assert g.round == 10


@criterion("Desk-scale rounds-to-target sweep")
def test_rounds_to_target_sweep(capsys):
    t0 = time.perf_counter()
    rows = {}
    for partition in ("iid", "label_skew"):
        cfg = ExperimentConfig(partition=partition)
        assert (cfg.clients, cfg.batch_size, cfg.target_metric, cfg.dataset_size,
                cfg.num_classes, cfg.max_rounds) == (5, 1, 0.80, 2000, 4, 200)
        rows[partition] = experiment.sweep_e(cfg, (1, 5, 10))
    _elapsed_below(t0, 120.0)
    with capsys.disabled():
        for partition, rs in rows.items():
            cells = ", ".join(f"E={r.local_epochs}: {r.rounds}" for r in rs)
            print(f"\n    rounds to target [{partition}] {cells}", end="")
    for rs in rows.values():
        assert all(r.reached_target and r.rounds <= 200 for r in rs)
    iid = {r.local_epochs: r.rounds for r in rows["iid"]}
    assert iid[5] <= iid[1]


def _to_detmetrics(scene):
    preds, gts = scene
    return ([Detection(p[0], *p[1:5], confidence=p[5]) for p in preds],
            [Box(g[0], *g[1:5]) for g in gts])


@criterion("Detection-metrics oracle")
def test_detection_metrics_oracle():
    rng = np.random.default_rng(4242)
    scenes = []
    while len(scenes) < 100:
        s = random_scene(rng, max_gt=5, max_pred=6, num_classes=3)
        if s[0] or s[1]:
            scenes.append(s)
    t0 = time.perf_counter()
    for s in scenes:
        ref = brute_force_eval([s])
        rep = evaluate_scenes([_to_detmetrics(s)])
        assert set(rep.per_class_ap) == set(ref["ap"])
        for c, ap in ref["ap"].items():
            assert abs(rep.per_class_ap[c] - ap) <= 1e-9
        assert abs(rep.map - ref["map"]) <= 1e-9
        assert abs(rep.precision - ref["precision"]) <= 1e-9
        assert abs(rep.recall - ref["recall"]) <= 1e-9
        assert abs(rep.f1 - ref["f1"]) <= 1e-9
    # pooled across images as well
    ref = brute_force_eval(scenes)
    rep = evaluate_scenes([_to_detmetrics(s) for s in scenes])
    assert abs(rep.map - ref["map"]) <= 1e-9 and abs(rep.f1 - ref["f1"]) <= 1e-9
    _elapsed_below(t0, 5.0)


@criterion("Hand-computed AP case")
def test_hand_computed_ap():
    assert abs(average_precision([True, False, True], 2) - 5 / 6) <= 1e-12


@criterion("IoU/NMS/F1 unit suite")
def test_iou_nms_f1_suite():
    a = Box(0, 0.5, 0.5, 0.2, 0.2)
    assert iou(a, a) == 1.0
    assert iou(a, Box(0, 0.9, 0.9, 0.1, 0.1)) == 0.0
    # corners (0,0)-(2,2) and (1,1)-(3,3) scaled by 1/4
    assert abs(iou(Box(0, 0.25, 0.25, 0.5, 0.5), Box(0, 0.5, 0.5, 0.5, 0.5)) - 1 / 7) <= 1e-12

    d = Detection(0, 0.5, 0.5, 0.2, 0.2, confidence=0.7)
    assert nms([d], 0.5) == [d]
    hi = Detection(0, 0.5, 0.5, 0.2, 0.2, confidence=0.9)
    lo = Detection(0, 0.5, 0.5, 0.2, 0.2, confidence=0.8)
    assert nms([lo, hi], 0.5) == [hi]
    other = Detection(1, 0.5, 0.5, 0.2, 0.2, confidence=0.8)
    assert sorted(nms([hi, other], 0.5), key=lambda x: x.class_id) == [hi, other]

    gt = Box(0, 0.5, 0.5, 0.2, 0.2)
    m = match_detections([Detection(0, 0.5, 0.5, 0.2, 0.2, confidence=1.0)], [gt], 0.5)
    assert m.is_tp == [True] and sum(m.fn_by_class.values()) == 0
    m = match_detections([lo, hi], [gt], 0.5)
    assert m.preds == [hi, lo] and m.is_tp == [True, False]
    m = match_detections([Detection(1, 0.5, 0.5, 0.2, 0.2, confidence=1.0)], [gt], 0.5)
    assert m.is_tp == [False] and m.fn_by_class == {0: 1}

    assert average_precision([True, True], 2) == 1.0
    assert average_precision([False, False], 1) == 0.0
    assert abs(average_precision([True, False, True], 2) - 5 / 6) <= 1e-12
    assert mean_average_precision({0: 0.7}) == 0.7
    assert mean_average_precision({0: 1.0, 1: 0.5}) == 0.75
    assert mean_average_precision({1: 0.5, 0: 1.0}) == 0.75

    assert f1_score(0.8, 0.8) == pytest.approx(0.8, abs=1e-15)
    assert abs(f1_score(1.0, 0.5) - 2 / 3) <= 1e-12
    assert f1_score(0.0, 0.0) == 0.0


def _free_listener():
    s = socket.create_server(("127.0.0.1", 0))
    return s, s.getsockname()


@criterion("Transport transparency")
def test_networked_loopback_csv_identical():
    cfg = ExperimentConfig(seed=11)
    t0 = time.perf_counter()
    setup = experiment.build(cfg)
    listener, addr = _free_listener()
    box = {}

    def serve():
        box["run"] = server_session(
            listener, ServerConfig(5, cfg.target_metric, cfg.max_rounds, 20.0, DTYPE_F64),
            setup.eval_set, setup.initial)

    server = threading.Thread(target=serve)
    server.start()
    workers = [threading.Thread(target=client_session, args=(addr, c, 20.0, DTYPE_F64))
               for c in setup.make_clients()]
    for w in workers:
        w.start()
    for w in [*workers, server]:
        w.join()
    listener.close()
    networked = experiment.rounds_csv(box["run"])
    simulated = experiment.rounds_csv(experiment.simulate(cfg))
    _elapsed_below(t0, 30.0)
    assert networked.encode() == simulated.encode()


def _mutate(raw: bytes, rng) -> bytes:
    b = bytearray(raw)
    kind = rng.integers(6)
    if kind == 0:  # flip one byte anywhere
        b[rng.integers(len(b))] ^= int(rng.integers(1, 256))
    elif kind == 1:  # flip one payload byte
        b[9 + rng.integers(len(b) - 13)] ^= int(rng.integers(1, 256))
    elif kind == 2:  # truncate
        del b[rng.integers(len(b)):]
    elif kind == 3:  # insert junk
        pos = rng.integers(len(b) + 1)
        b[pos:pos] = rng.bytes(int(rng.integers(1, 8)))
    elif kind == 4:  # delete a run
        pos = rng.integers(len(b))
        del b[pos:pos + int(rng.integers(1, 8))]
    else:  # scramble several bytes
        for _ in range(int(rng.integers(2, 6))):
            b[rng.integers(len(b))] = int(rng.integers(256))
    return bytes(b)


@criterion("Wire robustness")
def test_wire_fuzz(capsys):
    rng = np.random.default_rng(777)
    p = init_params(classifier_layout(8, 4), 5)
    originals = [
        (MsgType.GLOBAL_MODEL, GlobalModelMsg(3, 0.5, p).encode()),
        (MsgType.LOCAL_UPDATE, LocalUpdateMsg(3, 1, 400, 0.75, p).encode()),
        (MsgType.JOIN_REQUEST, (7).to_bytes(8, "big")),
        (MsgType.ABORT, b"timeout"),
    ]
    rejected = accepted_clean = prefix_then_error = 0
    for i in range(10_000):
        t, payload = originals[i % len(originals)]
        raw = _mutate(frame(t, payload), rng)
        # read the buffer as a connection would: frame after frame until it is exhausted
        stream = io.BytesIO(raw)
        frames = []
        try:
            frames.append(read_frame(stream))
            while stream.tell() < len(raw):
                frames.append(read_frame(stream))
        except FrameError:
            rejected += 1
            # a header mutation can leave a shorter frame whose CRC still checks
            # (e.g. length 0 and four zero bytes read as the CRC of an empty payload);
            # the leftover bytes then fail, so the stream is still rejected
            prefix_then_error += bool(frames)
            continue
        # accepted: exactly one frame carrying the untouched original payload
        assert [f[1] for f in frames] == [payload], f"corrupt payload accepted on case {i}"
        accepted_clean += 1
        got_type, got_payload = frames[0]
        try:
            if got_type in (MsgType.GLOBAL_MODEL, MsgType.TARGET_REACHED):
                GlobalModelMsg.decode(got_payload)
            elif got_type == MsgType.LOCAL_UPDATE:
                LocalUpdateMsg.decode(got_payload)
            elif got_type in (MsgType.JOIN_REQUEST, MsgType.JOIN_ACCEPT):
                decode_client_id(got_payload)
        except WireError:
            pass
    assert rejected + accepted_clean == 10_000
    with capsys.disabled():
        print(f"\n    fuzz: {rejected} rejected ({prefix_then_error} after a valid-looking prefix), "
              f"{accepted_clean} accepted with intact payload", end="")

    # every single-byte payload mutation is caught
    t, payload = originals[1]
    raw = frame(t, payload)
    for pos in range(9, 9 + len(payload)):
        bad = bytearray(raw)
        bad[pos] ^= int(rng.integers(1, 256))
        with pytest.raises(FrameError):
            read_frame(io.BytesIO(bytes(bad)))


@criterion("Finite-difference check")
def test_finite_differences():
    rng = np.random.default_rng(5150)
    h = 1e-6
    for _ in range(50):
        k, d, n = int(rng.integers(2, 6)), int(rng.integers(1, 7)), int(rng.integers(1, 25))
        data = LabeledDataset(rng.normal(size=(n, d)), rng.integers(0, k, n), k)
        p = init_params(classifier_layout(d, k), int(rng.integers(2**31)), scale=1.0)
        g = gradient(p, data)
        fd = np.empty_like(g)
        for i in range(len(g)):
            up, dn = p.values.copy(), p.values.copy()
            up[i] += h
            dn[i] -= h
            fd[i] = (loss(p.with_values(up), data) - loss(p.with_values(dn), data)) / (2 * h)
        assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)
        # the training kernel takes the same step: one full-batch epoch moves by lr * gradient
        lr = 1e-3
        stepped, _ = local_train(p, data, TrainConfig(1, n, lr, seed=0))
        implied = (p.values - stepped.values) / lr
        assert np.linalg.norm(implied - fd) <= 1e-5 * np.linalg.norm(fd)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
