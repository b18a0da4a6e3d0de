//! Truncated derivative tables in (t, x, z).
//!
//! Every correction term in the expansion is a product of a y-factor (thetas)
//! and a composite of the operators `D_k = R^k d^k/dx^k` applied to the
//! leading-order value `v0(t, x; lam_bar(z))`. The sub/super-solution
//! machinery needs exact partials of those composites in t, x and z. Instead
//! of nested finite differences, a `TxJet` carries the table
//! `d[i][k][j] = d_t^i d_z^k d_x^j f` truncated at one t-order, three
//! z-orders and [`XO`] x-orders, with Leibniz multiplication, shifts and
//! series reciprocal. Two structural identities close the calculus without
//! any numerical differentiation:
//!
//! ```text
//! v_t = -1/2 lam_bar^2 R v_x            (Merton PDE)
//! v_z = (T - t) lam_bar lam_bar' R v_x  (Vega-Gamma relation)
//! ```
//!
//! so a full table is seeded from the pure x-jet of `v0` plus the z-curve of
//! `lam_bar` alone. The same relations hold for any utility in the class, so
//! closed-form and H-transform Merton fields share the code path.

/// Retained x-derivative orders. Deep composites (five D-applications plus
/// three z-raises plus final second derivatives) consume about nineteen
/// orders in the worst case.
pub const XO: usize = 22;
/// Retained z orders (0..=3); one order is consumed by corrector terms that
/// contain an explicit z-derivative of a composite.
pub const ZO: usize = 4;
/// Retained t orders (0..=1).
pub const TO: usize = 2;

#[derive(Clone, Debug)]
pub struct TxJet {
    d: [[[f64; XO]; ZO]; TO],
}

impl TxJet {
    pub fn zero() -> Self {
        TxJet { d: [[[0.0; XO]; ZO]; TO] }
    }

    pub fn constant(c: f64) -> Self {
        let mut j = Self::zero();
        j.d[0][0][0] = c;
        j
    }

    /// Jet of the time-to-maturity variable `tau = T - t`.
    pub fn tau(tau: f64) -> Self {
        let mut j = Self::zero();
        j.d[0][0][0] = tau;
        j.d[1][0][0] = -1.0;
        j
    }

    /// Jet of a pure function of z given derivatives `[c, c', c'', c''']`.
    pub fn z_scalar(c: [f64; ZO]) -> Self {
        let mut j = Self::zero();
        for (k, v) in c.iter().enumerate() {
            j.d[0][k][0] = *v;
        }
        j
    }

    /// Seed from an x-jet (all t/z slabs zero).
    pub fn from_x_jet(x: &[f64]) -> Self {
        let mut j = Self::zero();
        for (i, v) in x.iter().take(XO).enumerate() {
            j.d[0][0][i] = *v;
        }
        j
    }

    #[inline]
    pub fn get(&self, it: usize, iz: usize, ix: usize) -> f64 {
        self.d[it][iz][ix]
    }

    #[inline]
    pub fn set(&mut self, it: usize, iz: usize, ix: usize, v: f64) {
        self.d[it][iz][ix] = v;
    }

    pub fn value(&self) -> f64 {
        self.d[0][0][0]
    }

    pub fn add(&self, o: &TxJet) -> TxJet {
        let mut r = self.clone();
        for it in 0..TO {
            for iz in 0..ZO {
                for ix in 0..XO {
                    r.d[it][iz][ix] += o.d[it][iz][ix];
                }
            }
        }
        r
    }

    pub fn sub(&self, o: &TxJet) -> TxJet {
        let mut r = self.clone();
        for it in 0..TO {
            for iz in 0..ZO {
                for ix in 0..XO {
                    r.d[it][iz][ix] -= o.d[it][iz][ix];
                }
            }
        }
        r
    }

    pub fn scale(&self, c: f64) -> TxJet {
        let mut r = self.clone();
        for it in 0..TO {
            for iz in 0..ZO {
                for ix in 0..XO {
                    r.d[it][iz][ix] *= c;
                }
            }
        }
        r
    }

    pub fn neg(&self) -> TxJet {
        self.scale(-1.0)
    }

    /// Leibniz product.
    pub fn mul(&self, o: &TxJet) -> TxJet {
        let mut r = TxJet::zero();
        // Binomials for the small t/z ranges.
        const BZ: [[f64; ZO]; ZO] = [
            [1.0, 0.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 2.0, 1.0, 0.0],
            [1.0, 3.0, 3.0, 1.0],
        ];
        for it in 0..TO {
            for iz in 0..ZO {
                for ix in 0..XO {
                    let mut acc = 0.0;
                    for jt in 0..=it {
                        // C(1,0)=C(1,1)=1
                        for jz in 0..=iz {
                            let bz = BZ[iz][jz];
                            let mut inner = 0.0;
                            for jx in 0..=ix {
                                inner += binom(ix, jx)
                                    * self.d[jt][jz][jx]
                                    * o.d[it - jt][iz - jz][ix - jx];
                            }
                            acc += bz * inner;
                        }
                    }
                    r.d[it][iz][ix] = acc;
                }
            }
        }
        r
    }

    /// d/dx: shift the x index (the top retained order becomes zero).
    pub fn dx(&self) -> TxJet {
        let mut r = TxJet::zero();
        for it in 0..TO {
            for iz in 0..ZO {
                for ix in 0..XO - 1 {
                    r.d[it][iz][ix] = self.d[it][iz][ix + 1];
                }
            }
        }
        r
    }

    /// d/dz: shift the z index.
    pub fn dz(&self) -> TxJet {
        let mut r = TxJet::zero();
        for it in 0..TO {
            for iz in 0..ZO - 1 {
                for ix in 0..XO {
                    r.d[it][iz][ix] = self.d[it][iz + 1][ix];
                }
            }
        }
        r
    }

    /// d/dt: shift the t index.
    pub fn dt(&self) -> TxJet {
        let mut r = TxJet::zero();
        for iz in 0..ZO {
            for ix in 0..XO {
                r.d[0][iz][ix] = self.d[1][iz][ix];
            }
        }
        r
    }

    /// Series reciprocal by Newton iteration `r <- r (2 - f r)`; the number
    /// of iterations doubles the accurate total order each time.
    pub fn recip(&self) -> TxJet {
        let f0 = self.value();
        debug_assert!(f0 != 0.0, "reciprocal of a jet with zero value");
        let mut r = TxJet::constant(1.0 / f0);
        let two = TxJet::constant(2.0);
        for _ in 0..6 {
            r = r.mul(&two.sub(&self.mul(&r)));
        }
        r
    }

    pub fn div(&self, o: &TxJet) -> TxJet {
        self.mul(&o.recip())
    }
}

fn binom(n: usize, k: usize) -> f64 {
    let mut b = 1.0;
    for j in 0..k {
        b *= (n - j) as f64 / (j + 1) as f64;
    }
    b
}

/// Context holding the fully-seeded jets of `v0` and `R` at a point,
/// plus the scalar curve data they were seeded from.
#[derive(Clone, Debug)]
pub struct MertonJet {
    pub v: TxJet,
    pub r: TxJet,
    pub lam: [f64; 5],
    pub tau: f64,
}

impl MertonJet {
    /// Seed the full (t, x, z) table from the x-jet of `v0` and the
    /// z-derivatives of `lam_bar`.
    pub fn seed(vx: &[f64], lam: [f64; 5], tau: f64) -> Self {
        let mut v = TxJet::from_x_jet(vx);
        let tau_jet = TxJet::tau(tau);
        // c1 = lam_bar * lam_bar' with z-derivatives by Leibniz.
        let (l, l1, l2, l3, l4) = (lam[0], lam[1], lam[2], lam[3], lam[4]);
        let c1 = TxJet::z_scalar([l * l1, l1 * l1 + l * l2, 3.0 * l1 * l2 + l * l3, 4.0 * l1 * l3 + 3.0 * l2 * l2 + l * l4]);
        let lam_sq = TxJet::z_scalar([l * l, 2.0 * l * l1, 2.0 * l1 * l1 + 2.0 * l * l2, 6.0 * l1 * l2 + 2.0 * l * l3]);

        // z-slabs: v_z = tau c1 R v_x, slab by slab (each step only reads
        // lower z-slabs of v).
        for k in 1..ZO {
            let r = v.dx().neg().div(&v.dx().dx());
            let rhs = tau_jet.mul(&c1).mul(&r).mul(&v.dx());
            for ix in 0..XO {
                let val = rhs.d[0][k - 1][ix];
                v.d[0][k][ix] = val;
            }
        }
        // t-slabs: v_t = -1/2 lam^2 R v_x at every z order.
        let r = v.dx().neg().div(&v.dx().dx());
        let rhs_t = lam_sq.mul(&r).mul(&v.dx()).scale(-0.5);
        for k in 0..ZO {
            for ix in 0..XO {
                v.d[1][k][ix] = rhs_t.d[0][k][ix];
            }
        }
        let r = v.dx().neg().div(&v.dx().dx());
        MertonJet { v, r, lam, tau }
    }

    /// Apply `D_1 = R d/dx`.
    pub fn d1(&self, f: &TxJet) -> TxJet {
        self.r.mul(&f.dx())
    }

    /// Apply `D_2 = R^2 d^2/dx^2`.
    pub fn d2(&self, f: &TxJet) -> TxJet {
        self.r.mul(&self.r).mul(&f.dx().dx())
    }

    /// Apply `(1/2) D_2 + D_1`.
    pub fn half_d2_plus_d1(&self, f: &TxJet) -> TxJet {
        self.d2(f).scale(0.5).add(&self.d1(f))
    }
}
