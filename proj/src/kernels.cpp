#include "mdtbox/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace mdtbox::kern {

namespace {

constexpr int kRowBlock = 8; // rows of x kept hot while streaming w

inline double dot(const double* __restrict__ a, const double* __restrict__ b, int n) {
    double acc = 0.0;
#pragma omp simd reduction(+ : acc)
    for (int i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

inline void axpy(double* __restrict__ y, double a, const double* __restrict__ x, int n) {
#pragma omp simd
    for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

inline double gelu_scalar(double x) {
    double u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}
inline double gelu_grad_scalar(double x) {
    double u = kGeluC * (x + kGeluA * x * x * x);
    double t = std::tanh(u);
    double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Softmax over one row of scores, in place; max-subtracted for stability.
inline void softmax_row(double* row, int n) {
    double m = row[0];
    for (int i = 1; i < n; ++i) m = std::max(m, row[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        row[i] = std::exp(row[i] - m);
        sum += row[i];
    }
    double inv = 1.0 / sum;
    for (int i = 0; i < n; ++i) row[i] *= inv;
}

} // namespace

void matmul_fwd(double* y, const double* x, const double* w, const double* bias,
                int M, int K, int N) {
#pragma omp parallel for schedule(static)
    for (int mb = 0; mb < M; mb += kRowBlock) {
        const int mend = std::min(mb + kRowBlock, M);
        for (int n = 0; n < N; ++n) {
            const double* wn = w + static_cast<size_t>(n) * K;
            const double b = bias ? bias[n] : 0.0;
            for (int m = mb; m < mend; ++m) {
                y[static_cast<size_t>(m) * N + n] =
                    dot(x + static_cast<size_t>(m) * K, wn, K) + b;
            }
        }
    }
}

void matmul_bwd_input(double* dx, const double* dy, const double* w,
                      int M, int K, int N) {
#pragma omp parallel for schedule(static)
    for (int m = 0; m < M; ++m) {
        double* dxm = dx + static_cast<size_t>(m) * K;
        const double* dym = dy + static_cast<size_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            axpy(dxm, dym[n], w + static_cast<size_t>(n) * K, K);
        }
    }
}

void matmul_bwd_params(double* dw, double* dbias, const double* dy, const double* x,
                       int M, int K, int N) {
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
        double* dwn = dw + static_cast<size_t>(n) * K;
        double db = 0.0;
        for (int m = 0; m < M; ++m) {
            const double g = dy[static_cast<size_t>(m) * N + n];
            axpy(dwn, g, x + static_cast<size_t>(m) * K, K);
            db += g;
        }
        if (dbias) dbias[n] += db;
    }
}

void layernorm_fwd(double* y, double* mean, double* rstd, const double* x,
                   int R, int C, double eps) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < R; ++r) {
        const double* xr = x + static_cast<size_t>(r) * C;
        double mu = 0.0;
        for (int c = 0; c < C; ++c) mu += xr[c];
        mu /= C;
        double var = 0.0;
        for (int c = 0; c < C; ++c) {
            double d = xr[c] - mu;
            var += d * d;
        }
        var /= C;
        double rs = 1.0 / std::sqrt(var + eps);
        mean[r] = mu;
        rstd[r] = rs;
        double* yr = y + static_cast<size_t>(r) * C;
        for (int c = 0; c < C; ++c) yr[c] = (xr[c] - mu) * rs;
    }
}

void layernorm_bwd(double* dx, const double* dy, const double* x,
                   const double* mean, const double* rstd, int R, int C) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < R; ++r) {
        const double* xr = x + static_cast<size_t>(r) * C;
        const double* dyr = dy + static_cast<size_t>(r) * C;
        double* dxr = dx + static_cast<size_t>(r) * C;
        const double mu = mean[r];
        const double rs = rstd[r];
        double dnorm_mean = 0.0, dnorm_norm_mean = 0.0;
        for (int c = 0; c < C; ++c) {
            double norm = (xr[c] - mu) * rs;
            dnorm_mean += dyr[c];
            dnorm_norm_mean += dyr[c] * norm;
        }
        dnorm_mean /= C;
        dnorm_norm_mean /= C;
        for (int c = 0; c < C; ++c) {
            double norm = (xr[c] - mu) * rs;
            dxr[c] += (dyr[c] - dnorm_mean - norm * dnorm_norm_mean) * rs;
        }
    }
}

void modulate_fwd(double* y, const double* x, const double* shift, const double* scale,
                  int B, int L, int C) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < B; ++b) {
        for (int l = 0; l < L; ++l) {
            const size_t off = (static_cast<size_t>(b) * L + l) * C;
            const double* sh = shift + static_cast<size_t>(b) * C;
            const double* sc = scale + static_cast<size_t>(b) * C;
#pragma omp simd
            for (int c = 0; c < C; ++c) y[off + c] = x[off + c] * (1.0 + sc[c]) + sh[c];
        }
    }
}

void modulate_bwd(double* dx, double* dshift, double* dscale, const double* dy,
                  const double* x, const double* scale, int B, int L, int C) {
#pragma omp parallel for schedule(static)
    for (int b = 0; b < B; ++b) {
        double* dsh = dshift + static_cast<size_t>(b) * C;
        double* dsc = dscale + static_cast<size_t>(b) * C;
        const double* sc = scale + static_cast<size_t>(b) * C;
        for (int l = 0; l < L; ++l) {
            const size_t off = (static_cast<size_t>(b) * L + l) * C;
            // x must be the pre-modulation forward input
            for (int c = 0; c < C; ++c) {
                const double g = dy[off + c];
                dsh[c] += g;
                dsc[c] += g * x[off + c];
                dx[off + c] += g * (1.0 + sc[c]);
            }
        }
    }
}

void gate_add_fwd(double* y, const double* x, const double* gate, const double* h,
                  int B, int L, int C) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < B; ++b) {
        for (int l = 0; l < L; ++l) {
            const size_t off = (static_cast<size_t>(b) * L + l) * C;
            const double* g = gate + static_cast<size_t>(b) * C;
#pragma omp simd
            for (int c = 0; c < C; ++c) y[off + c] = x[off + c] + g[c] * h[off + c];
        }
    }
}

void gate_add_bwd(double* dx, double* dgate, double* dh, const double* dy,
                  const double* gate, const double* h, int B, int L, int C) {
#pragma omp parallel for schedule(static)
    for (int b = 0; b < B; ++b) {
        const double* g = gate + static_cast<size_t>(b) * C;
        double* dg = dgate + static_cast<size_t>(b) * C;
        for (int l = 0; l < L; ++l) {
            const size_t off = (static_cast<size_t>(b) * L + l) * C;
            for (int c = 0; c < C; ++c) {
                const double grad = dy[off + c];
                dx[off + c] += grad;
                dh[off + c] += grad * g[c];
                dg[c] += grad * h[off + c];
            }
        }
    }
}

void gelu_fwd(double* y, const double* x, size_t n) {
#pragma omp parallel for schedule(static)
    for (ptrdiff_t i = 0; i < static_cast<ptrdiff_t>(n); ++i) y[i] = gelu_scalar(x[i]);
}

void gelu_bwd(double* dx, const double* dy, const double* x, size_t n) {
#pragma omp parallel for schedule(static)
    for (ptrdiff_t i = 0; i < static_cast<ptrdiff_t>(n); ++i)
        dx[i] += dy[i] * gelu_grad_scalar(x[i]);
}

void silu_fwd(double* y, const double* x, size_t n) {
#pragma omp parallel for schedule(static)
    for (ptrdiff_t i = 0; i < static_cast<ptrdiff_t>(n); ++i) {
        double s = sigmoid(x[i]);
        y[i] = x[i] * s;
    }
}

void silu_bwd(double* dx, const double* dy, const double* x, size_t n) {
#pragma omp parallel for schedule(static)
    for (ptrdiff_t i = 0; i < static_cast<ptrdiff_t>(n); ++i) {
        double s = sigmoid(x[i]);
        dx[i] += dy[i] * s * (1.0 + x[i] * (1.0 - s));
    }
}

void attention_fwd(double* out, double* att, const double* qkv,
                   int B, int L, int D, int H) {
    const int hd = D / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const size_t row3 = static_cast<size_t>(3) * D;
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
            const double* base = qkv + static_cast<size_t>(b) * L * row3;
            double* attbh = att + ((static_cast<size_t>(b) * H + h) * L) * L;
            const size_t ho = static_cast<size_t>(h) * hd;
            for (int t = 0; t < L; ++t) {
                const double* q = base + t * row3 + ho;
                double* arow = attbh + static_cast<size_t>(t) * L;
                for (int t2 = 0; t2 < L; ++t2) {
                    const double* k = base + t2 * row3 + D + ho;
                    arow[t2] = dot(q, k, hd) * scale;
                }
                softmax_row(arow, L);
                double* o = out + (static_cast<size_t>(b) * L + t) * D + ho;
                std::memset(o, 0, sizeof(double) * hd);
                for (int t2 = 0; t2 < L; ++t2) {
                    const double* v = base + t2 * row3 + 2 * D + ho;
                    axpy(o, arow[t2], v, hd);
                }
            }
        }
    }
}

void attention_bwd(double* dqkv, const double* dout, const double* att,
                   const double* qkv, double* scratch, int B, int L, int D, int H) {
    const int hd = D / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const size_t row3 = static_cast<size_t>(3) * D;
    std::fill(dqkv, dqkv + static_cast<size_t>(B) * L * row3, 0.0);
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
            const double* base = qkv + static_cast<size_t>(b) * L * row3;
            double* dbase = dqkv + static_cast<size_t>(b) * L * row3;
            const double* attbh = att + ((static_cast<size_t>(b) * H + h) * L) * L;
            double* datt = scratch + ((static_cast<size_t>(b) * H + h) * L) * L;
            const size_t ho = static_cast<size_t>(h) * hd;

            // datt[t,t2] = dout[t] . v[t2];  dv[t2] += att[t,t2] * dout[t]
            for (int t = 0; t < L; ++t) {
                const double* do_ = dout + (static_cast<size_t>(b) * L + t) * D + ho;
                const double* arow = attbh + static_cast<size_t>(t) * L;
                double* drow = datt + static_cast<size_t>(t) * L;
                for (int t2 = 0; t2 < L; ++t2) {
                    const double* v = base + t2 * row3 + 2 * D + ho;
                    drow[t2] = dot(do_, v, hd);
                    double* dv = dbase + t2 * row3 + 2 * D + ho;
                    axpy(dv, arow[t2], do_, hd);
                }
            }
            // softmax backward, then to q and k
            for (int t = 0; t < L; ++t) {
                const double* arow = attbh + static_cast<size_t>(t) * L;
                double* drow = datt + static_cast<size_t>(t) * L;
                double s = 0.0;
                for (int j = 0; j < L; ++j) s += arow[j] * drow[j];
                for (int j = 0; j < L; ++j) drow[j] = arow[j] * (drow[j] - s) * scale;
                const double* q = base + t * row3 + ho;
                double* dq = dbase + t * row3 + ho;
                for (int j = 0; j < L; ++j) {
                    const double* k = base + j * row3 + D + ho;
                    double* dk = dbase + j * row3 + D + ho;
                    axpy(dq, drow[j], k, hd);
                    axpy(dk, drow[j], q, hd);
                }
            }
        }
    }
}

void gather_rows(double* y, const double* x, const int* idx, int R, int C) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < R; ++r) {
        std::memcpy(y + static_cast<size_t>(r) * C,
                    x + static_cast<size_t>(idx[r]) * C, sizeof(double) * C);
    }
}

void scatter_add_rows(double* y, const double* x, const int* idx, int R, int C) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < R; ++r) {
        double* yr = y + static_cast<size_t>(idx[r]) * C;
        const double* xr = x + static_cast<size_t>(r) * C;
#pragma omp simd
        for (int c = 0; c < C; ++c) yr[c] += xr[c];
    }
}

void add_inplace(double* y, const double* x, size_t n) {
#pragma omp parallel for schedule(static)
    for (ptrdiff_t i = 0; i < static_cast<ptrdiff_t>(n); ++i) y[i] += x[i];
}

void scale_inplace(double* y, double a, size_t n) {
#pragma omp parallel for schedule(static)
    for (ptrdiff_t i = 0; i < static_cast<ptrdiff_t>(n); ++i) y[i] *= a;
}

void conv3x3s2_fwd(double* y, const double* x, const double* w, const double* bias,
                   int Cin, int H, int W, int Cout) {
    const int Ho = H / 2, Wo = W / 2;
#pragma omp parallel for collapse(2) schedule(static)
    for (int co = 0; co < Cout; ++co) {
        for (int oy = 0; oy < Ho; ++oy) {
            for (int ox = 0; ox < Wo; ++ox) {
                double acc = bias ? bias[co] : 0.0;
                for (int ci = 0; ci < Cin; ++ci) {
                    const double* xp = x + static_cast<size_t>(ci) * H * W;
                    const double* wp = w + ((static_cast<size_t>(co) * Cin + ci) * 9);
                    for (int ky = 0; ky < 3; ++ky) {
                        int iy = 2 * oy - 1 + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            int ix = 2 * ox - 1 + kx;
                            if (ix < 0 || ix >= W) continue;
                            acc += xp[static_cast<size_t>(iy) * W + ix] * wp[ky * 3 + kx];
                        }
                    }
                }
                y[(static_cast<size_t>(co) * Ho + oy) * Wo + ox] = acc;
            }
        }
    }
}

void conv3x3s2_bwd(double* dx, double* dw, double* dbias, const double* dy,
                   const double* x, const double* w, int Cin, int H, int W, int Cout) {
    const int Ho = H / 2, Wo = W / 2;
    if (dx) {
#pragma omp parallel for schedule(static)
        for (int ci = 0; ci < Cin; ++ci) {
            double* dxp = dx + static_cast<size_t>(ci) * H * W;
            for (int iy = 0; iy < H; ++iy) {
                for (int ix = 0; ix < W; ++ix) {
                    double acc = 0.0;
                    for (int ky = 0; ky < 3; ++ky) {
                        int oy2 = iy + 1 - ky;
                        if (oy2 < 0 || (oy2 & 1)) continue;
                        int oy = oy2 >> 1;
                        if (oy >= Ho) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            int ox2 = ix + 1 - kx;
                            if (ox2 < 0 || (ox2 & 1)) continue;
                            int ox = ox2 >> 1;
                            if (ox >= Wo) continue;
                            for (int co = 0; co < Cout; ++co) {
                                acc += dy[(static_cast<size_t>(co) * Ho + oy) * Wo + ox] *
                                       w[((static_cast<size_t>(co) * Cin + ci) * 9) + ky * 3 + kx];
                            }
                        }
                    }
                    dxp[static_cast<size_t>(iy) * W + ix] += acc;
                }
            }
        }
    }
#pragma omp parallel for collapse(2) schedule(static)
    for (int co = 0; co < Cout; ++co) {
        for (int ci = 0; ci < Cin; ++ci) {
            double* dwp = dw + ((static_cast<size_t>(co) * Cin + ci) * 9);
            const double* xp = x + static_cast<size_t>(ci) * H * W;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    double acc = 0.0;
                    for (int oy = 0; oy < Ho; ++oy) {
                        int iy = 2 * oy - 1 + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int ox = 0; ox < Wo; ++ox) {
                            int ix = 2 * ox - 1 + kx;
                            if (ix < 0 || ix >= W) continue;
                            acc += dy[(static_cast<size_t>(co) * Ho + oy) * Wo + ox] *
                                   xp[static_cast<size_t>(iy) * W + ix];
                        }
                    }
                    dwp[ky * 3 + kx] += acc;
                }
            }
        }
    }
    if (dbias) {
        for (int co = 0; co < Cout; ++co) {
            double acc = 0.0;
            const double* dyp = dy + static_cast<size_t>(co) * Ho * Wo;
            for (int i = 0; i < Ho * Wo; ++i) acc += dyp[i];
            dbias[co] += acc;
        }
    }
}

void deconv2x2s2_fwd(double* y, const double* x, const double* w, const double* bias,
                     int Cin, int h, int w_, int Cout) {
    const int Ho = 2 * h, Wo = 2 * w_;
#pragma omp parallel for collapse(2) schedule(static)
    for (int co = 0; co < Cout; ++co) {
        for (int i = 0; i < h; ++i) {
            for (int j = 0; j < w_; ++j) {
                double acc[4] = {0, 0, 0, 0};
                for (int ci = 0; ci < Cin; ++ci) {
                    const double xin = x[(static_cast<size_t>(ci) * h + i) * w_ + j];
                    const double* wp = w + ((static_cast<size_t>(ci) * Cout + co) * 4);
                    acc[0] += xin * wp[0];
                    acc[1] += xin * wp[1];
                    acc[2] += xin * wp[2];
                    acc[3] += xin * wp[3];
                }
                const double b = bias ? bias[co] : 0.0;
                double* yp = y + static_cast<size_t>(co) * Ho * Wo;
                yp[static_cast<size_t>(2 * i) * Wo + 2 * j] = acc[0] + b;
                yp[static_cast<size_t>(2 * i) * Wo + 2 * j + 1] = acc[1] + b;
                yp[static_cast<size_t>(2 * i + 1) * Wo + 2 * j] = acc[2] + b;
                yp[static_cast<size_t>(2 * i + 1) * Wo + 2 * j + 1] = acc[3] + b;
            }
        }
    }
}

void deconv2x2s2_bwd(double* dx, double* dw, double* dbias, const double* dy,
                     const double* x, const double* w, int Cin, int h, int w_, int Cout) {
    const int Ho = 2 * h, Wo = 2 * w_;
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < Cin; ++ci) {
        for (int i = 0; i < h; ++i) {
            for (int j = 0; j < w_; ++j) {
                double acc = 0.0;
                for (int co = 0; co < Cout; ++co) {
                    const double* wp = w + ((static_cast<size_t>(ci) * Cout + co) * 4);
                    const double* dyp = dy + static_cast<size_t>(co) * Ho * Wo;
                    acc += dyp[static_cast<size_t>(2 * i) * Wo + 2 * j] * wp[0];
                    acc += dyp[static_cast<size_t>(2 * i) * Wo + 2 * j + 1] * wp[1];
                    acc += dyp[static_cast<size_t>(2 * i + 1) * Wo + 2 * j] * wp[2];
                    acc += dyp[static_cast<size_t>(2 * i + 1) * Wo + 2 * j + 1] * wp[3];
                }
                dx[(static_cast<size_t>(ci) * h + i) * w_ + j] += acc;
            }
        }
    }
#pragma omp parallel for collapse(2) schedule(static)
    for (int ci = 0; ci < Cin; ++ci) {
        for (int co = 0; co < Cout; ++co) {
            double acc[4] = {0, 0, 0, 0};
            const double* dyp = dy + static_cast<size_t>(co) * Ho * Wo;
            for (int i = 0; i < h; ++i) {
                for (int j = 0; j < w_; ++j) {
                    const double xin = x[(static_cast<size_t>(ci) * h + i) * w_ + j];
                    acc[0] += xin * dyp[static_cast<size_t>(2 * i) * Wo + 2 * j];
                    acc[1] += xin * dyp[static_cast<size_t>(2 * i) * Wo + 2 * j + 1];
                    acc[2] += xin * dyp[static_cast<size_t>(2 * i + 1) * Wo + 2 * j];
                    acc[3] += xin * dyp[static_cast<size_t>(2 * i + 1) * Wo + 2 * j + 1];
                }
            }
            double* dwp = dw + ((static_cast<size_t>(ci) * Cout + co) * 4);
            for (int k = 0; k < 4; ++k) dwp[k] += acc[k];
        }
    }
    if (dbias) {
        for (int co = 0; co < Cout; ++co) {
            double acc = 0.0;
            const double* dyp = dy + static_cast<size_t>(co) * Ho * Wo;
            for (int i = 0; i < Ho * Wo; ++i) acc += dyp[i];
            dbias[co] += acc;
        }
    }
}

// ---------------------------------------------------------------------------
// Serial reference implementations. Straight loops, no blocking, no pragmas.
// ---------------------------------------------------------------------------

namespace ref {

void matmul_fwd(double* y, const double* x, const double* w, const double* bias,
                int M, int K, int N) {
    for (int m = 0; m < M; ++m) {
        for (int n = 0; n < N; ++n) {
            double acc = bias ? bias[n] : 0.0;
            for (int k = 0; k < K; ++k)
                acc += x[static_cast<size_t>(m) * K + k] * w[static_cast<size_t>(n) * K + k];
            y[static_cast<size_t>(m) * N + n] = acc;
        }
    }
}

void matmul_bwd_input(double* dx, const double* dy, const double* w,
                      int M, int K, int N) {
    for (int m = 0; m < M; ++m)
        for (int k = 0; k < K; ++k) {
            double acc = 0.0;
            for (int n = 0; n < N; ++n)
                acc += dy[static_cast<size_t>(m) * N + n] * w[static_cast<size_t>(n) * K + k];
            dx[static_cast<size_t>(m) * K + k] += acc;
        }
}

void matmul_bwd_params(double* dw, double* dbias, const double* dy, const double* x,
                       int M, int K, int N) {
    for (int n = 0; n < N; ++n) {
        for (int k = 0; k < K; ++k) {
            double acc = 0.0;
            for (int m = 0; m < M; ++m)
                acc += dy[static_cast<size_t>(m) * N + n] * x[static_cast<size_t>(m) * K + k];
            dw[static_cast<size_t>(n) * K + k] += acc;
        }
        if (dbias) {
            double db = 0.0;
            for (int m = 0; m < M; ++m) db += dy[static_cast<size_t>(m) * N + n];
            dbias[n] += db;
        }
    }
}

void layernorm_fwd(double* y, double* mean, double* rstd, const double* x,
                   int R, int C, double eps) {
    for (int r = 0; r < R; ++r) {
        const double* xr = x + static_cast<size_t>(r) * C;
        double mu = 0.0;
        for (int c = 0; c < C; ++c) mu += xr[c];
        mu /= C;
        double var = 0.0;
        for (int c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= C;
        double rs = 1.0 / std::sqrt(var + eps);
        mean[r] = mu;
        rstd[r] = rs;
        for (int c = 0; c < C; ++c) y[static_cast<size_t>(r) * C + c] = (xr[c] - mu) * rs;
    }
}

void layernorm_bwd(double* dx, const double* dy, const double* x,
                   const double* mean, const double* rstd, int R, int C) {
    for (int r = 0; r < R; ++r) {
        const double* xr = x + static_cast<size_t>(r) * C;
        const double* dyr = dy + static_cast<size_t>(r) * C;
        double a = 0.0, bswm = 0.0;
        for (int c = 0; c < C; ++c) {
            double norm = (xr[c] - mean[r]) * rstd[r];
            a += dyr[c];
            bswm += dyr[c] * norm;
        }
        a /= C;
        bswm /= C;
        for (int c = 0; c < C; ++c) {
            double norm = (xr[c] - mean[r]) * rstd[r];
            dx[static_cast<size_t>(r) * C + c] += (dyr[c] - a - norm * bswm) * rstd[r];
        }
    }
}

void modulate_fwd(double* y, const double* x, const double* shift, const double* scale,
                  int B, int L, int C) {
    for (int b = 0; b < B; ++b)
        for (int l = 0; l < L; ++l)
            for (int c = 0; c < C; ++c) {
                size_t off = (static_cast<size_t>(b) * L + l) * C + c;
                y[off] = x[off] * (1.0 + scale[static_cast<size_t>(b) * C + c]) +
                         shift[static_cast<size_t>(b) * C + c];
            }
}

void modulate_bwd(double* dx, double* dshift, double* dscale, const double* dy,
                  const double* x, const double* scale, int B, int L, int C) {
    for (int b = 0; b < B; ++b)
        for (int l = 0; l < L; ++l)
            for (int c = 0; c < C; ++c) {
                size_t off = (static_cast<size_t>(b) * L + l) * C + c;
                dshift[static_cast<size_t>(b) * C + c] += dy[off];
                dscale[static_cast<size_t>(b) * C + c] += dy[off] * x[off];
                dx[off] += dy[off] * (1.0 + scale[static_cast<size_t>(b) * C + c]);
            }
}

void gate_add_fwd(double* y, const double* x, const double* gate, const double* h,
                  int B, int L, int C) {
    for (int b = 0; b < B; ++b)
        for (int l = 0; l < L; ++l)
            for (int c = 0; c < C; ++c) {
                size_t off = (static_cast<size_t>(b) * L + l) * C + c;
                y[off] = x[off] + gate[static_cast<size_t>(b) * C + c] * h[off];
            }
}

void gate_add_bwd(double* dx, double* dgate, double* dh, const double* dy,
                  const double* gate, const double* h, int B, int L, int C) {
    for (int b = 0; b < B; ++b)
        for (int l = 0; l < L; ++l)
            for (int c = 0; c < C; ++c) {
                size_t off = (static_cast<size_t>(b) * L + l) * C + c;
                dx[off] += dy[off];
                dh[off] += dy[off] * gate[static_cast<size_t>(b) * C + c];
                dgate[static_cast<size_t>(b) * C + c] += dy[off] * h[off];
            }
}

void gelu_fwd(double* y, const double* x, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] = gelu_scalar(x[i]);
}
void gelu_bwd(double* dx, const double* dy, const double* x, size_t n) {
    for (size_t i = 0; i < n; ++i) dx[i] += dy[i] * gelu_grad_scalar(x[i]);
}
void silu_fwd(double* y, const double* x, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] = x[i] * sigmoid(x[i]);
}
void silu_bwd(double* dx, const double* dy, const double* x, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        double s = sigmoid(x[i]);
        dx[i] += dy[i] * s * (1.0 + x[i] * (1.0 - s));
    }
}

void attention_fwd(double* out, double* att, const double* qkv,
                   int B, int L, int D, int H) {
    const int hd = D / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const size_t row3 = static_cast<size_t>(3) * D;
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
            const double* base = qkv + static_cast<size_t>(b) * L * row3;
            double* attbh = att + ((static_cast<size_t>(b) * H + h) * L) * L;
            const size_t ho = static_cast<size_t>(h) * hd;
            for (int t = 0; t < L; ++t) {
                double* arow = attbh + static_cast<size_t>(t) * L;
                for (int t2 = 0; t2 < L; ++t2) {
                    double acc = 0.0;
                    for (int e = 0; e < hd; ++e)
                        acc += base[t * row3 + ho + e] * base[t2 * row3 + D + ho + e];
                    arow[t2] = acc * scale;
                }
                softmax_row(arow, L);
                double* o = out + (static_cast<size_t>(b) * L + t) * D + ho;
                for (int e = 0; e < hd; ++e) o[e] = 0.0;
                for (int t2 = 0; t2 < L; ++t2)
                    for (int e = 0; e < hd; ++e)
                        o[e] += arow[t2] * base[t2 * row3 + 2 * D + ho + e];
            }
        }
    }
}

void attention_bwd(double* dqkv, const double* dout, const double* att,
                   const double* qkv, double* scratch, int B, int L, int D, int H) {
    const int hd = D / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const size_t row3 = static_cast<size_t>(3) * D;
    std::fill(dqkv, dqkv + static_cast<size_t>(B) * L * row3, 0.0);
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
            const double* base = qkv + static_cast<size_t>(b) * L * row3;
            double* dbase = dqkv + static_cast<size_t>(b) * L * row3;
            const double* attbh = att + ((static_cast<size_t>(b) * H + h) * L) * L;
            double* datt = scratch + ((static_cast<size_t>(b) * H + h) * L) * L;
            const size_t ho = static_cast<size_t>(h) * hd;
            for (int t = 0; t < L; ++t) {
                const double* do_ = dout + (static_cast<size_t>(b) * L + t) * D + ho;
                for (int t2 = 0; t2 < L; ++t2) {
                    double acc = 0.0;
                    for (int e = 0; e < hd; ++e) acc += do_[e] * base[t2 * row3 + 2 * D + ho + e];
                    datt[static_cast<size_t>(t) * L + t2] = acc;
                    for (int e = 0; e < hd; ++e)
                        dbase[t2 * row3 + 2 * D + ho + e] +=
                            attbh[static_cast<size_t>(t) * L + t2] * do_[e];
                }
            }
            for (int t = 0; t < L; ++t) {
                const double* arow = attbh + static_cast<size_t>(t) * L;
                double* drow = datt + static_cast<size_t>(t) * L;
                double s = 0.0;
                for (int j = 0; j < L; ++j) s += arow[j] * drow[j];
                for (int j = 0; j < L; ++j) drow[j] = arow[j] * (drow[j] - s) * scale;
                for (int j = 0; j < L; ++j) {
                    for (int e = 0; e < hd; ++e) {
                        dbase[t * row3 + ho + e] += drow[j] * base[j * row3 + D + ho + e];
                        dbase[j * row3 + D + ho + e] += drow[j] * base[t * row3 + ho + e];
                    }
                }
            }
        }
    }
}

} // namespace ref

} // namespace mdtbox::kern
