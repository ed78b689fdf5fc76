"""Unit conversion constants (oilfield I/O units to SI)."""

MILLIDARCY = 9.869233e-16  # m^2
BAR = 1.0e5  # Pa
DAY = 86400.0  # s
CENTIPOISE = 1.0e-3  # Pa*s


def md_to_m2(k):
    return k * MILLIDARCY


def bar_to_pa(p):
    return p * BAR


def m3day_to_m3s(q):
    return q / DAY


def m3s_to_m3day(q):
    return q * DAY
