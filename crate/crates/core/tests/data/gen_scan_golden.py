"""Writes scan_golden.json: a plain-Python unroll of the diagonal recurrence

    h_k = exp(delta_k * a) * h_{k-1} + delta_k * b_k * x_k
    y_k = sum_n c_k[n] * h_k[n] + d * x_k

on a fixed pseudo-random instance (L=64, N=8, two channels).
"""
import json
import math
import random

L, E, N = 64, 2, 8
rng = random.Random(20240501)
u = lambda lo, hi, n: [rng.uniform(lo, hi) for _ in range(n)]

x = u(-1.0, 1.0, L * E)
delta = u(0.01, 0.5, L * E)
b = u(-1.0, 1.0, L * N)
c = u(-1.0, 1.0, L * N)
a = u(-3.0, -0.1, E * N)
d = u(-1.0, 1.0, E)

y = [0.0] * (L * E)
for e in range(E):
    h = [0.0] * N
    for k in range(L):
        xk, dk = x[k * E + e], delta[k * E + e]
        acc = 0.0
        for n in range(N):
            h[n] = math.exp(dk * a[e * N + n]) * h[n] + dk * b[k * N + n] * xk
            acc += c[k * N + n] * h[n]
        y[k * E + e] = acc + d[e] * xk

with open("scan_golden.json", "w") as f:
    json.dump(dict(len=L, channels=E, state=N, x=x, delta=delta, b=b, c=c, a=a, d=d, y=y), f)
