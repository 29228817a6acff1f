#!/usr/bin/env python3
"""Independent reference values for the frozen constants in the test suites.

Uses only the Python standard library and shares no code with the Rust crates.
Run it to reprint every constant; the tests carry the printed values.
"""
import hashlib
import math
import struct


def binom_sigma(p, n):
    return math.sqrt(p * (1 - p) / n)


def chain_delivery(losses):
    out = 1.0
    for p in losses:
        out *= 1 - p
    return out


def segments(bw_mbps, duration_s, payload):
    return math.floor(bw_mbps * 1e6 / 8 * duration_s / payload)


def median(xs):
    s = sorted(xs)
    n = len(s)
    return s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2


def mad(xs):
    m = median(xs)
    return median([abs(x - m) for x in xs])


def path_signature(hops):
    h = hashlib.sha256()
    for n in hops:
        if n is None:
            h.update(b"\x00")
        else:
            b = n.encode()
            h.update(b"\x01" + struct.pack(">I", len(b)) + b)
    return h.hexdigest()


def main():
    d2 = chain_delivery([0.01, 0.01])
    print(f"two-link delivery        {d2:.6f}  sigma(1e5) {binom_sigma(d2, 100_000):.6f}")
    l3 = 1 - chain_delivery([0.01] * 3)
    print(f"three-link loss          {l3:.6f}  sigma(1e4) {binom_sigma(l3, 10_000):.6f}")
    d10 = chain_delivery([0.0, 0.10])
    print(f"one degraded link        {d10:.6f}  sigma(1e4) {binom_sigma(d10, 10_000):.6f}")
    l2 = 1 - d2
    print(f"latency-test loss 1e4    {l2:.6f}  sigma {binom_sigma(l2, 10_000):.6f}")

    n = segments(100, 10, 1500)
    p = 0.02
    print(f"segments 100Mbps/10s/1500 {n}  retrans mean {n * p:.2f}  sigma {math.sqrt(n * p * (1 - p)):.2f}")
    print(f"achieved mean            {100 * (1 - p):.2f} Mbps")

    base = [0.001] * 20
    m, dv = median(base), mad(base)
    print(f"loss baseline            median {m} mad {dv} stat threshold {m + 5 * dv}")

    print(f"infeasible busy time     {99 * 30} s per host vs repeat 60 s")

    canon = "kind=latency src=a dst=b start=60000 sent=100 lost=2 dmin=12 dmed=12.25 dp95=13.5"
    print(f"dedup key golden         {hashlib.sha256(canon.encode()).hexdigest()}")
    print(f"signature [B,C]          {path_signature(['B', 'C'])}")


if __name__ == "__main__":
    main()
