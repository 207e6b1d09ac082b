"""High-precision constants for the heavy-tailed offspring law p_k = c k^-2 (log k)^-2, k >= 2.

Prints the normalizer c, the mean A_H, and derived masses to 25 significant
digits. Values are frozen into the test suite as regression constants; the
package recomputes them in float64 with integral-comparison tail bounds and must
agree to well below 1e-10.

Method: direct summation of the first K terms, then closed-form tail integrals
with Euler-Maclaurin corrections through the f'/12 term:

    sum_{k>K} f(k) = int_{K+1}^inf f dx + f(K+1)/2 - f'(K+1)/12 + O(f''')

The integrals are exact: int dx/(x log^2 x) = -1/log x, and with u = log x,
int_a^inf x^-2 log^-2 x dx = E_2(log a)/log a. Do NOT replace these with
mp.quad over [a, inf]: for these slowly decaying integrands quadrature on the
infinite interval is off in the second decimal place while looking
superficially converged (its error is almost independent of a, so comparing
different K values does not expose it).

Run prints three K values; all shown digits must agree between K = 2**16 and
K = 2**20 (the 2**24 row wobbles in the last couple of digits from float64
accumulation in the partial sum and is only a sanity row).
"""

import numpy as np
import mpmath as mp

mp.mp.dps = 40


def s1_partial(K):
    k = np.arange(2, K + 1, dtype=np.float64)
    return mp.mpf(float(np.sum(1.0 / (k * np.log(k) ** 2))))


def z_partial(K):
    k = np.arange(2, K + 1, dtype=np.float64)
    return mp.mpf(float(np.sum(1.0 / (k**2 * np.log(k) ** 2))))


def main():
    fm = lambda x: 1 / (x * mp.log(x) ** 2)
    dfm = lambda x: -(mp.log(x) + 2) / (x**2 * mp.log(x) ** 3)
    fz = lambda x: 1 / (x**2 * mp.log(x) ** 2)
    dfz = lambda x: -(2 * mp.log(x) + 2) / (x**3 * mp.log(x) ** 3)

    for K in (2**16, 2**20, 2**24):
        a = mp.mpf(K + 1)
        S1 = s1_partial(K) + 1 / mp.log(a) + fm(a) / 2 - dfm(a) / 12
        Z = z_partial(K) + mp.expint(2, mp.log(a)) / mp.log(a) + fz(a) / 2 - dfz(a) / 12
        c = 1 / Z
        A = c * S1
        print(f"K = 2**{K.bit_length() - 1}")
        print("  Z      =", mp.nstr(Z, 25))
        print("  c      =", mp.nstr(c, 25))
        print("  A_H    =", mp.nstr(A, 25))
        print("  lambda1(HEAVY) = A_H - 1 =", mp.nstr(A - 1, 25))
        print("  p2     =", mp.nstr(c / (4 * mp.log(2) ** 2), 25))
        print("  p2_hat =", mp.nstr((c / A) / (2 * mp.log(2) ** 2), 25))
        print("  c/A_H  =", mp.nstr(c / A, 25))


if __name__ == "__main__":
    main()
