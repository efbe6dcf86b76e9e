"""Cycle-counting model of the smallNet datapath.

The model follows one controller FSM per image::

    IDLE -> LOAD -> (WINDOW -> MAC -> ACTIVATE -> WRITE)* -> DONE

Every conv output pixel and every dense neuron is one pass through the
WINDOW/MAC/ACTIVATE/WRITE loop. Pooling runs in a separate comparator unit
while the controller holds WRITE.

Cycle model (pure function of the image size, never of pixel values):

* stage handshake: 4 cycles before each of the five stages (counted as overhead)
* conv over HxW: W+1 line-buffer priming cycles, then 4 cycles per output pixel
* pool: 1 cycle per output
* dense: per neuron 1 WINDOW + 49 MAC + 1 ACTIVATE + 1 WRITE, neurons in sequence

Arithmetic is done with scalar Q16.16 ints, separately from the vectorised
engine in ``netcore``. The two must agree bit for bit.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fixedpoint as fxp
from . import netcore as nc

HANDSHAKE_CYCLES = 4
FIFO_CAPACITY = 784
STAGES = ("conv1", "pool1", "conv2", "pool2", "dense")


class ProtocolError(RuntimeError):
    pass


class FsmState(enum.Enum):
    IDLE = "IDLE"
    LOAD = "LOAD"
    WINDOW = "WINDOW"
    MAC = "MAC"
    ACTIVATE = "ACTIVATE"
    WRITE = "WRITE"
    DONE = "DONE"


S = FsmState
LEGAL_EDGES = frozenset({
    (S.IDLE, S.LOAD), (S.LOAD, S.WINDOW), (S.WINDOW, S.MAC), (S.MAC, S.ACTIVATE),
    (S.ACTIVATE, S.WRITE), (S.WRITE, S.WINDOW), (S.WRITE, S.DONE),
})


def trace_is_legal(states) -> bool:
    states = list(states)
    if not states or states[0] is not S.IDLE or states[-1] is not S.DONE:
        return False
    return all((a, b) in LEGAL_EDGES for a, b in zip(states, states[1:]))


@dataclass(frozen=True)
class StreamBeat:
    """One word on the input stream; ``index`` is the row-major pixel position."""

    data: fxp.Fx32
    valid: bool = True
    index: int = 0


class InputFifo:
    """Bounded beat queue between the DMA feeder and the windowing module."""

    def __init__(self, capacity: int = FIFO_CAPACITY):
        if capacity < 1:
            raise ValueError("FIFO capacity must be positive")
        self.capacity = capacity
        self._q: deque[StreamBeat] = deque()
        self.high_water = 0

    def __len__(self) -> int:
        return len(self._q)

    @property
    def full(self) -> bool:
        return len(self._q) >= self.capacity

    def push(self, beat: StreamBeat) -> bool:
        """Accept a beat unless full. A False return means the feeder stalls."""
        if self.full:
            return False
        self._q.append(beat)
        self.high_water = max(self.high_water, len(self._q))
        return True

    def pop(self) -> StreamBeat | None:
        return self._q.popleft() if self._q else None


def stream_image(image) -> list[StreamBeat]:
    """Row-major valid beats for a quantized (int64 raw) image."""
    image = np.asarray(image)
    if image.dtype != np.int64:
        raise TypeError(f"stream_image expects raw Q16.16 int64 pixels, got {image.dtype}")
    return [StreamBeat(fxp.Fx32(int(v)), True, i) for i, v in enumerate(image.ravel())]


@dataclass(frozen=True)
class Window:
    row: int
    col: int
    taps: tuple[int, int, int, int]  # top-left, top-right, bottom-left, bottom-right (raw)


class LineBuffer:
    """Windowing module: W+1 stored pixels plus the incoming one form a 2x2 window.

    After the last real pixel the controller injects zeros (``step(None)``),
    which become the bottom padding row. Windows in the last column have their
    right taps forced to zero.
    """

    def __init__(self, height: int, width: int):
        if height < 1 or width < 1:
            raise ValueError("line buffer needs positive dimensions")
        self.height = height
        self.width = width
        self._buf: deque[int] = deque(maxlen=width + 1)
        self.received = 0   # real beats consumed
        self.position = 0   # pixels shifted in, padding included
        self.emitted = 0

    @property
    def frame_complete(self) -> bool:
        return self.received == self.height * self.width

    @property
    def drained(self) -> bool:
        return self.emitted == self.height * self.width

    def step(self, beat: StreamBeat | None) -> Window | None:
        if self.drained:
            raise ProtocolError("line buffer already emitted every window of the frame")
        if beat is None:
            if not self.frame_complete:
                raise ProtocolError("padding injected before the frame was complete")
            value = 0
        else:
            if not beat.valid:
                return None
            if self.frame_complete:
                raise ProtocolError(f"beat {beat.index} arrived after the end of the frame")
            if beat.index != self.received:
                raise ProtocolError(f"beat {beat.index} out of order, expected {self.received}")
            value = beat.data.raw
            self.received += 1

        window = None
        w = self.width
        if self.position >= w + 1:
            k = self.position - w - 1
            row, col = divmod(k, w)
            buf = self._buf
            if col == w - 1:
                taps = (buf[0], 0, buf[w], 0)
            else:
                taps = (buf[0], buf[1], buf[w], value)
            window = Window(row, col, taps)
            self.emitted += 1
        self._buf.append(value)
        self.position += 1
        return window


def window_step(buffer: LineBuffer, beat: StreamBeat | None) -> Window | None:
    return buffer.step(beat)


class Datapath:
    """Scalar saturating Q16.16 units, counting every saturation."""

    def __init__(self, lut: fxp.SigmoidLut = fxp.DEFAULT_LUT):
        self.lut = lut
        self.saturations = 0

    def _sat(self, v: int) -> int:
        if v > fxp.RAW_MAX:
            self.saturations += 1
            return fxp.RAW_MAX
        if v < fxp.RAW_MIN:
            self.saturations += 1
            return fxp.RAW_MIN
        return v

    def mul(self, a: int, b: int) -> int:
        return self._sat((a * b) >> fxp.FRAC_BITS)

    def add(self, a: int, b: int) -> int:
        return self._sat(a + b)

    def sigmoid(self, x: int) -> int:
        return self.lut.lookup(x)


def mac_fire(window, kernel, bias, datapath: Datapath | None = None) -> int:
    """Four parallel multiplies, adder tree ((m0+m1)+(m2+m3)), then bias. Raw in, raw out."""
    dp = datapath or Datapath()
    taps = window.taps if isinstance(window, Window) else tuple(int(t) for t in np.ravel(window))
    k = [int(v) for v in np.ravel(kernel)]
    m0, m1, m2, m3 = (dp.mul(t, kk) for t, kk in zip(taps, k))
    return dp.add(dp.add(dp.add(m0, m1), dp.add(m2, m3)), int(bias))


@dataclass
class ResultRegister:
    class_code: int = 0
    done_flag: bool = False

    def __post_init__(self):
        if not 0 <= self.class_code <= 9:
            raise ValueError(f"class code {self.class_code} outside 0..9")


@dataclass(frozen=True)
class CycleReport:
    cycles_conv1: int
    cycles_pool1: int
    cycles_conv2: int
    cycles_pool2: int
    cycles_dense: int
    cycles_overhead: int
    cycles_total: int
    trace_length: dict

    def stage_sum(self) -> int:
        return (self.cycles_conv1 + self.cycles_pool1 + self.cycles_conv2
                + self.cycles_pool2 + self.cycles_dense)


def expected_cycles(height: int = 28, width: int = 28) -> int:
    """Closed form of the cycle model for an HxW input."""
    h2, w2 = height // 2, width // 2
    h4, w4 = h2 // 2, w2 // 2
    conv = lambda h, w: (w + 1) + 4 * h * w
    dense = nc.CLASSES * (1 + h4 * w4 + 1 + 1)
    return (conv(height, width) + h2 * w2 + conv(h2, w2) + h4 * w4 + dense
            + HANDSHAKE_CYCLES * len(STAGES))


def latency_at(report: CycleReport, clock_hz: int) -> float:
    """Seconds for one inference at the given clock."""
    if clock_hz <= 0:
        raise ValueError("clock_hz must be positive")
    return report.cycles_total / clock_hz


@dataclass
class PipelineResult:
    scores: list[int]
    result: ResultRegister
    report: CycleReport
    trace: list[FsmState]
    segments: list[tuple[FsmState, str, int]] = field(repr=False)
    done_cycle: int = 0
    last_write_cycle: int = 0
    windows_emitted: dict = field(default_factory=dict)
    saturations: int = 0

    @property
    def class_code(self) -> int:
        return self.result.class_code

    def scores_array(self) -> np.ndarray:
        return np.asarray(self.scores, dtype=np.int64)


class _Controller:
    """Records state segments and attributes cycles to stages."""

    def __init__(self):
        self.state = S.IDLE
        self.states = [S.IDLE]
        self.segments: list[list] = [[S.IDLE, "idle", 0]]
        self.cycle = 0
        self.stage_cycles = dict.fromkeys(STAGES, 0)
        self.overhead = 0

    def goto(self, state: FsmState) -> None:
        if state is self.state:
            return
        if (self.state, state) not in LEGAL_EDGES:
            raise ProtocolError(f"illegal FSM edge {self.state.name} -> {state.name}")
        self.state = state
        self.states.append(state)

    def tick(self, stage: str, n: int = 1, overhead: bool = False) -> None:
        label = "handshake" if overhead else stage
        seg = self.segments[-1]
        if seg[0] is self.state and seg[1] == label:
            seg[2] += n
        else:
            self.segments.append([self.state, label, n])
        self.cycle += n
        if overhead:
            self.overhead += n
        else:
            self.stage_cycles[stage] += n


class PipelineSim:
    """One simulator instance; reuse it for a sequence of images."""

    def __init__(self, qparams, lut: fxp.SigmoidLut = fxp.DEFAULT_LUT,
                 fifo_capacity: int = FIFO_CAPACITY):
        self.lut = lut
        self.fifo_capacity = fifo_capacity
        self.k1 = [int(v) for v in qparams.conv1.kernel.ravel()]
        self.b1 = int(qparams.conv1.bias)
        self.k2 = [int(v) for v in qparams.conv2.kernel.ravel()]
        self.b2 = int(qparams.conv2.bias)
        self.dense_w = [[int(v) for v in row] for row in qparams.dense.weights]
        self.dense_b = [int(v) for v in qparams.dense.biases]
        self.interrupts = 0
        self.register = ResultRegister()

    def _conv_stage(self, ctl, dp, name, height, width, kernel, bias, source):
        """Drive one conv layer. ``source(cycle_hook)`` yields the next beat or None."""
        lb = LineBuffer(height, width)
        out = [[0] * width for _ in range(height)]
        while not lb.drained:
            ctl.goto(S.WINDOW)
            win = None
            while win is None:
                beat = source()
                if beat is None and not lb.frame_complete:
                    ctl.tick(name)  # input starved, WINDOW waits
                    continue
                win = lb.step(beat)
                ctl.tick(name)
            ctl.goto(S.MAC)
            m0, m1, m2, m3 = (dp.mul(t, k) for t, k in zip(win.taps, kernel))
            acc = dp.add(dp.add(dp.add(m0, m1), dp.add(m2, m3)), bias)
            ctl.tick(name)
            ctl.goto(S.ACTIVATE)
            act = dp.sigmoid(acc)
            ctl.tick(name)
            ctl.goto(S.WRITE)
            out[win.row][win.col] = act
            ctl.tick(name)
        return out, lb.emitted

    @staticmethod
    def _pool_stage(ctl, name, fmap):
        h, w = len(fmap) // 2, len(fmap[0]) // 2
        out = [[0] * w for _ in range(h)]
        for i in range(h):
            for j in range(w):
                a, b = fmap[2 * i][2 * j], fmap[2 * i][2 * j + 1]
                c, d = fmap[2 * i + 1][2 * j], fmap[2 * i + 1][2 * j + 1]
                out[i][j] = max(a, b, c, d)
                ctl.tick(name)
        return out

    def run(self, image, trace_path=None) -> PipelineResult:
        image = np.asarray(image)
        if image.shape != (nc.INPUT_SIDE, nc.INPUT_SIDE):
            raise ValueError(f"expected a 28x28 image, got {image.shape}")
        if image.dtype != np.int64:
            image = nc.FIXED.prepare_input(image)
        ctl = _Controller()
        dp = Datapath(self.lut)
        self.register = ResultRegister()

        # DMA feeder pushes one beat per cycle into the FIFO while it has room
        beats = stream_image(image)
        fifo = InputFifo(self.fifo_capacity)
        pending = deque(beats)

        def feed():
            if pending and fifo.push(pending[0]):
                pending.popleft()

        # conv1: the feeder runs on every conv1 cycle, including the handshake
        ctl.goto(S.LOAD)
        for _ in range(HANDSHAKE_CYCLES):
            feed()
            ctl.tick("conv1", overhead=True)

        def from_fifo():
            feed()
            return fifo.pop()

        fmap1, win1 = self._conv_stage(ctl, dp, "conv1", nc.INPUT_SIDE, nc.INPUT_SIDE,
                                       self.k1, self.b1, from_fifo)
        if pending or len(fifo):
            raise ProtocolError("conv1 finished with unconsumed input beats")

        ctl.tick("pool1", HANDSHAKE_CYCLES, overhead=True)
        pool1 = self._pool_stage(ctl, "pool1", fmap1)

        # conv2 reads pool1's buffer in raster order
        ctl.tick("conv2", HANDSHAKE_CYCLES, overhead=True)
        side = len(pool1)
        bram = deque(StreamBeat(fxp.Fx32(v), True, i)
                     for i, v in enumerate(x for row in pool1 for x in row))
        fmap2, win2 = self._conv_stage(ctl, dp, "conv2", side, side, self.k2, self.b2,
                                       lambda: bram.popleft() if bram else None)

        ctl.tick("pool2", HANDSHAKE_CYCLES, overhead=True)
        pool2 = self._pool_stage(ctl, "pool2", fmap2)
        flat = [x for row in pool2 for x in row]

        ctl.tick("dense", HANDSHAKE_CYCLES, overhead=True)
        scores = []
        best, best_idx = None, 0
        last_write = 0
        for o, (wrow, bias) in enumerate(zip(self.dense_w, self.dense_b)):
            ctl.goto(S.WINDOW)  # select weight row, clear accumulator
            ctl.tick("dense")
            ctl.goto(S.MAC)
            acc = 0
            for x, w in zip(flat, wrow):
                acc = dp.add(acc, dp.mul(x, w))
            ctl.tick("dense", len(flat))
            ctl.goto(S.ACTIVATE)
            score = dp.sigmoid(dp.add(acc, bias))
            ctl.tick("dense")
            ctl.goto(S.WRITE)
            scores.append(score)
            # max finder: ascending scan with strict greater-than
            if best is None or score > best:
                best, best_idx = score, o
            ctl.tick("dense")
            last_write = ctl.cycle

        ctl.goto(S.DONE)
        self.register = ResultRegister(best_idx, True)
        self.interrupts += 1
        done_cycle = ctl.cycle

        report = CycleReport(
            cycles_conv1=ctl.stage_cycles["conv1"],
            cycles_pool1=ctl.stage_cycles["pool1"],
            cycles_conv2=ctl.stage_cycles["conv2"],
            cycles_pool2=ctl.stage_cycles["pool2"],
            cycles_dense=ctl.stage_cycles["dense"],
            cycles_overhead=ctl.overhead,
            cycles_total=ctl.cycle,
            trace_length={"states": len(ctl.states), "segments": len(ctl.segments)},
        )
        segments = [tuple(s) for s in ctl.segments] + [(S.DONE, "done", 0)]
        result = PipelineResult(
            scores=scores, result=self.register, report=report, trace=list(ctl.states),
            segments=segments, done_cycle=done_cycle, last_write_cycle=last_write,
            windows_emitted={"conv1": win1, "conv2": win2}, saturations=dp.saturations,
        )
        if trace_path is not None:
            dump_trace(result, trace_path)
        return result


def run_pipeline(image, qparams, lut: fxp.SigmoidLut = fxp.DEFAULT_LUT,
                 trace_path=None) -> PipelineResult:
    return PipelineSim(qparams, lut).run(image, trace_path)


def iter_trace_lines(result: PipelineResult):
    yield "cycle,state,stage"
    cycle = 0
    for state, stage, n in result.segments:
        for _ in range(n):
            yield f"{cycle},{state.name},{stage}"
            cycle += 1
    yield f"{cycle},{S.DONE.name},done"


def dump_trace(result: PipelineResult, path) -> None:
    Path(path).write_text("\n".join(iter_trace_lines(result)) + "\n")


def read_trace(path) -> list[tuple[int, str, str]]:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        c, state, stage = line.split(",")
        rows.append((int(c), state, stage))
    return rows
