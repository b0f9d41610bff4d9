import numpy as np

from ltpfleo.orbital import ContactSchedule, VisibilityWindow


def make_schedule(windows_by_sat: dict[int, list[tuple[float, float]]], horizon_s: float = 1e9):
    """Build a ContactSchedule from raw (start, end) tuples."""
    windows = {
        sat: tuple(VisibilityWindow(sat, lo, hi) for lo, hi in sorted(spans))
        for sat, spans in windows_by_sat.items()
    }
    return ContactSchedule(horizon_s=horizon_s, sample_step_s=10.0, windows=windows)


def random_schedule(num_sats: int, rng: np.random.Generator, horizon_s: float = 20000.0,
                    max_passes: int = 5):
    """Random per-satellite pass structure: disjoint sorted windows."""
    windows = {}
    for sat in range(num_sats):
        spans = []
        t = float(rng.uniform(0.0, 2000.0))
        for _ in range(int(rng.integers(1, max_passes + 1))):
            start = t + float(rng.uniform(0.0, 3000.0))
            end = start + float(rng.uniform(120.0, 900.0))
            if end > horizon_s:
                break
            spans.append((start, end))
            t = end
        windows[sat] = spans
    return make_schedule(windows, horizon_s=horizon_s)


def lockstep_schedule(num_sats: int, *, cycle_s: float = 1800.0, width_s: float = 900.0,
                      cycles: int = 400):
    """Every satellite shares identical periodic windows (dense co-visibility)."""
    spans = [(n * cycle_s, n * cycle_s + width_s) for n in range(cycles)]
    return make_schedule({sat: list(spans) for sat in range(num_sats)},
                         horizon_s=cycle_s * cycles)
