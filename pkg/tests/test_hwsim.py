import numpy as np
import pytest

from smallnet import fixedpoint as fxp
from smallnet import hwsim
from smallnet import netcore as nc
from smallnet.hwsim import FsmState as S
from smallnet.quantizer import quantize_params
from smallnet.trainer import init_params

from . import oracles


@pytest.fixture(scope="module")
def qparams():
    return quantize_params(init_params(11))


def raw_image(seed):
    return fxp.vfrom_real(np.random.default_rng(seed).random((28, 28)))


def run_windows(image):
    h, w = image.shape
    lb = hwsim.LineBuffer(h, w)
    wins = []
    for beat in hwsim.stream_image(image):
        win = hwsim.window_step(lb, beat)
        if win:
            wins.append(win)
    while not lb.drained:
        win = lb.step(None)
        if win:
            wins.append(win)
    return wins


class TestStream:
    def test_count_and_order(self):
        img = np.arange(784, dtype=np.int64).reshape(28, 28)
        beats = hwsim.stream_image(img)
        assert len(beats) == 784 and all(b.valid for b in beats)
        assert beats[1].data.raw == img[0, 1]

    def test_zero_image(self):
        assert all(b.data.raw == 0 for b in hwsim.stream_image(np.zeros((28, 28), np.int64)))

    def test_needs_raw(self):
        with pytest.raises(TypeError):
            hwsim.stream_image(np.zeros((28, 28)))


class TestFifo:
    def test_stalls_when_full(self):
        fifo = hwsim.InputFifo(2)
        beat = hwsim.StreamBeat(fxp.ZERO)
        assert fifo.push(beat) and fifo.push(beat)
        assert not fifo.push(beat)
        assert len(fifo) == 2
        fifo.pop()
        assert fifo.push(beat)

    def test_tiny_fifo_same_result(self, qparams):
        img = raw_image(1)
        big = hwsim.PipelineSim(qparams).run(img)
        small = hwsim.PipelineSim(qparams, fifo_capacity=1).run(img)
        assert big.scores == small.scores


class TestWindowing:
    def test_count(self):
        assert len(run_windows(raw_image(0))) == 784

    def test_corner_padding(self):
        img = np.full((28, 28), 7, np.int64)
        corner = [w for w in run_windows(img) if (w.row, w.col) == (27, 27)][0]
        assert corner.taps == (7, 0, 0, 0)

    def test_edges(self):
        img = np.arange(1, 10, dtype=np.int64).reshape(3, 3)
        wins = {(w.row, w.col): w.taps for w in run_windows(img)}
        assert wins[(0, 0)] == (1, 2, 4, 5)
        assert wins[(0, 2)] == (3, 0, 6, 0)
        assert wins[(2, 0)] == (7, 8, 0, 0)
        assert len(wins) == 9

    def test_replay_matches_conv(self):
        rng = np.random.default_rng(3)
        for seed in range(100):
            img = raw_image(seed)
            k = rng.integers(-(1 << 16), 1 << 16, (2, 2))
            b = int(rng.integers(-(1 << 15), 1 << 15))
            p = nc.ConvParams(k, np.int64(b))
            out = np.zeros((28, 28), np.int64)
            for w in run_windows(img):
                out[w.row, w.col] = hwsim.mac_fire(w, k, b)
            assert np.array_equal(out, nc.conv2d_same(img, p, nc.FIXED))

    def test_out_of_order(self):
        lb = hwsim.LineBuffer(2, 2)
        lb.step(hwsim.StreamBeat(fxp.ZERO, True, 0))
        with pytest.raises(hwsim.ProtocolError):
            lb.step(hwsim.StreamBeat(fxp.ZERO, True, 2))

    def test_invalid_beats_ignored(self):
        lb = hwsim.LineBuffer(2, 2)
        assert lb.step(hwsim.StreamBeat(fxp.Fx32(5), False, 9)) is None
        assert lb.received == 0

    def test_padding_before_frame_end(self):
        lb = hwsim.LineBuffer(2, 2)
        with pytest.raises(hwsim.ProtocolError):
            lb.step(None)

    def test_beat_after_frame(self):
        img = np.zeros((2, 2), np.int64)
        lb = hwsim.LineBuffer(2, 2)
        for beat in hwsim.stream_image(img):
            lb.step(beat)
        with pytest.raises(hwsim.ProtocolError):
            lb.step(hwsim.StreamBeat(fxp.ZERO, True, 4))


class TestMac:
    def test_zero_window(self):
        assert hwsim.mac_fire([0, 0, 0, 0], [[5, 6], [7, 8]], 1234) == 1234

    def test_halves(self):
        one, half = fxp.ONE, fxp.ONE // 2
        assert hwsim.mac_fire([one] * 4, [[half, half], [half, half]], 0) == 2 * one

    def test_random_windows_against_conv_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(10_000):
            x = rng.integers(fxp.RAW_MIN, fxp.RAW_MAX, (2, 2))
            k = rng.integers(-(8 << 16), 8 << 16, (2, 2))
            b = int(rng.integers(fxp.RAW_MIN, fxp.RAW_MAX))
            expected = oracles.conv_fixed(x, k, b)[0, 0]
            assert hwsim.mac_fire(x.ravel(), k, b) == expected


class TestPipeline:
    def test_all_zero(self):
        q = quantize_params(nc.NetworkParams.zeros())
        res = hwsim.run_pipeline(np.zeros((28, 28), np.int64), q)
        assert res.class_code == 0 and res.scores == [0x8000] * 10

    def test_bit_exact_random_images(self, qparams):
        sim = hwsim.PipelineSim(qparams)
        for seed in range(20):
            img = raw_image(seed)
            res = sim.run(img)
            scores, cls = nc.forward(img, qparams)
            assert np.array_equal(res.scores_array(), scores)
            assert res.class_code == cls == nc.max_finder(res.scores_array())

    def test_done_once_per_image(self, qparams):
        sim = hwsim.PipelineSim(qparams)
        for i in range(10):
            res = sim.run(raw_image(i))
            assert res.result.done_flag
            assert res.trace.count(S.DONE) == 1 and res.trace[-1] is S.DONE
            assert res.last_write_cycle <= res.done_cycle
        assert sim.interrupts == 10

    def test_trace_legal(self, qparams):
        res = hwsim.run_pipeline(raw_image(0), qparams)
        assert hwsim.trace_is_legal(res.trace)
        # 784 + 196 conv pixels and 10 dense neurons, 4 states each
        assert res.trace.count(S.WRITE) == 784 + 196 + 10
        assert res.windows_emitted == {"conv1": 784, "conv2": 196}

    def test_illegal_traces_detected(self):
        assert not hwsim.trace_is_legal([S.IDLE, S.LOAD, S.MAC, S.DONE])
        assert not hwsim.trace_is_legal([S.IDLE, S.LOAD, S.WINDOW, S.MAC, S.ACTIVATE, S.WRITE])

    def test_cycle_model(self, qparams):
        rep = hwsim.run_pipeline(raw_image(0), qparams).report
        assert rep.cycles_conv1 == 29 + 4 * 784
        assert rep.cycles_pool1 == 196
        assert rep.cycles_conv2 == 15 + 4 * 196
        assert rep.cycles_pool2 == 49
        assert rep.cycles_dense == 10 * (1 + 49 + 1 + 1)
        assert rep.cycles_overhead == 5 * 4
        assert rep.cycles_total == rep.stage_sum() + rep.cycles_overhead == hwsim.expected_cycles()

    def test_cycles_independent_of_values(self, qparams):
        images = [raw_image(s) for s in range(3)] + [np.zeros((28, 28), np.int64)]
        reports = [hwsim.run_pipeline(img, qparams).report for img in images]
        assert all(r == reports[0] for r in reports)

    def test_trace_dump(self, qparams, tmp_path):
        res = hwsim.run_pipeline(raw_image(2), qparams, trace_path=tmp_path / "t.csv")
        rows = hwsim.read_trace(tmp_path / "t.csv")
        assert (tmp_path / "t.csv").read_text().startswith("cycle,state,stage\n")
        assert len(rows) == res.report.cycles_total + 1
        assert [r[0] for r in rows] == list(range(len(rows)))
        states = [S[rows[0][1]]]
        for _, st, _ in rows[1:]:
            if S[st] is not states[-1]:
                states.append(S[st])
        assert hwsim.trace_is_legal([S.IDLE] + states)
        stages = [r[2] for r in rows]
        assert stages.count("handshake") == 20 and stages.count("dense") == 520

    def test_saturation_counted(self):
        vec = np.zeros(510)
        vec[0:4] = 30000.0
        q = quantize_params(nc.NetworkParams.from_vector(vec))
        res = hwsim.run_pipeline(np.full((28, 28), 1.0), q)
        assert res.saturations > 0
        scores, _ = nc.forward(np.full((28, 28), 1.0), q)
        assert np.array_equal(res.scores_array(), scores)


class TestLatency:
    def test_one_ms(self):
        rep = hwsim.CycleReport(0, 0, 0, 0, 0, 0, 1000, {})
        assert hwsim.latency_at(rep, 1_000_000) == 0.001

    def test_inverse_scaling(self, qparams):
        rep = hwsim.run_pipeline(raw_image(0), qparams).report
        for hz in (1_000_000, 50_000_000, 100_000_000):
            assert hwsim.latency_at(rep, 2 * hz) * 2 == hwsim.latency_at(rep, hz)

    @pytest.mark.parametrize("hz", [0, -5])
    def test_bad_clock(self, hz):
        with pytest.raises(ValueError):
            hwsim.latency_at(hwsim.CycleReport(0, 0, 0, 0, 0, 0, 1, {}), hz)
