#pragma once

// Small decoder-only transformer with hand-written backward pass.
//
// Pre-LayerNorm blocks, learned token + absolute position embeddings,
// multi-head causal self-attention, ReLU MLP, untied output projection.
// All parameters live in one flat buffer so the optimizer and the
// finite-difference checks can treat the model as a plain vector.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "uprobe/errors.hpp"
#include "uprobe/rng.hpp"

namespace uprobe::toy {

struct TransformerShape {
    int vocab = 4;
    int context = 65;
    int width = 64;
    int layers = 2;
    int heads = 4;
    int mlp_mult = 4;

    int head_dim() const { return width / heads; }
    int hidden() const { return width * mlp_mult; }

    void validate() const {
        if (vocab <= 0 || context <= 0 || width <= 0 || layers <= 0 || heads <= 0 || mlp_mult <= 0) {
            throw ConfigError("transformer shape fields must be positive");
        }
        if (width % heads != 0) {
            throw ConfigError("transformer width must be divisible by the head count");
        }
    }
};

template <typename Scalar>
class Transformer {
public:
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Vec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
    using MatMap = Eigen::Map<Mat>;
    using CMatMap = Eigen::Map<const Mat>;
    using VecMap = Eigen::Map<Vec>;
    using CVecMap = Eigen::Map<const Vec>;
    // aligned, so Eigen's loop peeling (and rounding) is the same every run
    using Buffer = std::vector<Scalar, Eigen::aligned_allocator<Scalar>>;

    Transformer() = default;

    explicit Transformer(TransformerShape shape) : shape_(shape) {
        shape_.validate();
        layout();
        params_.assign(total_, Scalar(0));
    }

    // Fan-in scaled normal weights; residual output projections further
    // scaled by 1/sqrt(2 * layers); unit-variance embeddings; LayerNorm
    // gain 1 / bias 0.
    void init(std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t D = shape_.width, F = shape_.hidden();
        const double w_d = 1.0 / std::sqrt(static_cast<double>(D));
        const double w_f = 1.0 / std::sqrt(static_cast<double>(F));
        const double depth = std::sqrt(2.0 * shape_.layers);
        auto fill = [&](std::size_t off, std::size_t n, double stddev) {
            for (std::size_t i = 0; i < n; ++i) params_[off + i] = static_cast<Scalar>(stddev * rng.normal());
        };
        auto ones = [&](std::size_t off, std::size_t n) {
            for (std::size_t i = 0; i < n; ++i) params_[off + i] = Scalar(1);
        };
        std::fill(params_.begin(), params_.end(), Scalar(0));
        fill(off_.tok, shape_.vocab * D, 1.0);
        fill(off_.pos, shape_.context * D, 1.0);
        for (const auto& L : off_.blocks) {
            ones(L.ln1_g, D);
            fill(L.wqkv, D * 3 * D, w_d);
            fill(L.wo, D * D, w_d / depth);
            ones(L.ln2_g, D);
            fill(L.w1, D * F, w_d);
            fill(L.w2, F * D, w_f / depth);
        }
        ones(off_.lnf_g, D);
        fill(off_.wout, D * shape_.vocab, w_d);
    }

    const TransformerShape& shape() const { return shape_; }
    std::size_t parameter_count() const { return total_; }

    // 1 for weight matrices and embeddings, 0 for biases and LayerNorm.
    std::vector<char> decay_mask() const {
        const std::size_t D = shape_.width, F = shape_.hidden();
        std::vector<char> mask(total_, 0);
        auto mark = [&](std::size_t off, std::size_t n) { std::fill_n(mask.begin() + off, n, 1); };
        mark(off_.tok, shape_.vocab * D);
        mark(off_.pos, shape_.context * D);
        for (const auto& L : off_.blocks) {
            mark(L.wqkv, D * 3 * D);
            mark(L.wo, D * D);
            mark(L.w1, D * F);
            mark(L.w2, F * D);
        }
        mark(off_.wout, D * shape_.vocab);
        return mask;
    }
    std::span<Scalar> parameters() { return params_; }
    std::span<const Scalar> parameters() const { return params_; }

    // Logits for every position of `batch` sequences of length `seq_len`,
    // packed row-major: row b*seq_len + t. Inference only, no caching.
    Mat logits(std::span<const int> tokens, int batch, int seq_len) const {
        Cache cache;
        forward(tokens, batch, seq_len, cache);
        return cache.logits;
    }

    // Mean next-token cross-entropy over positions whose weight is nonzero,
    // and its gradient w.r.t. all parameters. `targets[n]` is the token to
    // predict at row n; `weights[n]` is 0 (ignored) or 1.
    Scalar loss_and_gradient(std::span<const int> tokens, std::span<const int> targets,
                             std::span<const Scalar> weights, int batch, int seq_len,
                             std::vector<Scalar>& grad) const {
        Cache c;
        forward(tokens, batch, seq_len, c);
        const int N = batch * seq_len;
        const int V = shape_.vocab;
        Scalar denom = 0;
        for (int n = 0; n < N; ++n) denom += weights[n];
        if (denom <= 0) throw TrainingError("loss weights are all zero");

        Mat dlogits(N, V);
        Scalar loss = 0;
        for (int n = 0; n < N; ++n) {
            auto row = c.logits.row(n);
            const Scalar mx = row.maxCoeff();
            Scalar z = 0;
            for (int v = 0; v < V; ++v) z += std::exp(row(v) - mx);
            const Scalar lse = mx + std::log(z);
            const Scalar w = weights[n] / denom;
            if (weights[n] != 0) loss -= weights[n] * (row(targets[n]) - lse);
            for (int v = 0; v < V; ++v) dlogits(n, v) = w * std::exp(row(v) - lse);
            dlogits(n, targets[n]) -= w;
        }
        loss /= denom;

        Buffer g(total_, Scalar(0));
        backward(tokens, batch, seq_len, c, dlogits, g);
        grad.assign(g.begin(), g.end());
        return loss;
    }

private:
    struct BlockOffsets {
        std::size_t ln1_g, ln1_b, wqkv, bqkv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };
    struct Offsets {
        std::size_t tok, pos;
        std::vector<BlockOffsets> blocks;
        std::size_t lnf_g, lnf_b, wout, bout;
    };

    struct NormCache {
        Mat xhat;
        Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_sigma;
    };

    struct BlockCache {
        NormCache ln1, ln2;
        Mat h, qkv, o, h2, u;
        std::vector<Mat> probs;  // batch * heads, each seq_len x seq_len
    };

    struct Cache {
        std::vector<BlockCache> blocks;
        NormCache lnf;
        Mat hf, logits;
    };

    void layout() {
        const std::size_t D = shape_.width, F = shape_.hidden();
        std::size_t o = 0;
        auto take = [&](std::size_t n) {
            const std::size_t at = o;
            o += n;
            return at;
        };
        off_.tok = take(shape_.vocab * D);
        off_.pos = take(shape_.context * D);
        off_.blocks.clear();
        for (int l = 0; l < shape_.layers; ++l) {
            BlockOffsets b{};
            b.ln1_g = take(D);
            b.ln1_b = take(D);
            b.wqkv = take(D * 3 * D);
            b.bqkv = take(3 * D);
            b.wo = take(D * D);
            b.bo = take(D);
            b.ln2_g = take(D);
            b.ln2_b = take(D);
            b.w1 = take(D * F);
            b.b1 = take(F);
            b.w2 = take(F * D);
            b.b2 = take(D);
            off_.blocks.push_back(b);
        }
        off_.lnf_g = take(D);
        off_.lnf_b = take(D);
        off_.wout = take(D * shape_.vocab);
        off_.bout = take(shape_.vocab);
        total_ = o;
    }

    CMatMap cmat(std::size_t off, int rows, int cols) const { return CMatMap(params_.data() + off, rows, cols); }
    CVecMap cvec(std::size_t off, int n) const { return CVecMap(params_.data() + off, n); }
    static MatMap gmat(Buffer& g, std::size_t off, int rows, int cols) {
        return MatMap(g.data() + off, rows, cols);
    }
    static VecMap gvec(Buffer& g, std::size_t off, int n) { return VecMap(g.data() + off, n); }

    static constexpr Scalar kNormEps = Scalar(1e-5);

    Mat layer_norm(const Mat& x, std::size_t g_off, std::size_t b_off, NormCache& nc) const {
        const int N = static_cast<int>(x.rows());
        const int D = static_cast<int>(x.cols());
        nc.xhat.resize(N, D);
        nc.inv_sigma.resize(N);
        for (int n = 0; n < N; ++n) {
            const Scalar mu = x.row(n).mean();
            const Scalar var = (x.row(n).array() - mu).square().mean();
            const Scalar inv = Scalar(1) / std::sqrt(var + kNormEps);
            nc.inv_sigma(n) = inv;
            nc.xhat.row(n) = (x.row(n).array() - mu) * inv;
        }
        Mat y = nc.xhat.array().rowwise() * cvec(g_off, D).array();
        y.rowwise() += cvec(b_off, D);
        return y;
    }

    Mat layer_norm_backward(const Mat& dy, const NormCache& nc, std::size_t g_off, std::size_t b_off,
                            Buffer& grad) const {
        const int N = static_cast<int>(dy.rows());
        const int D = static_cast<int>(dy.cols());
        gvec(grad, g_off, D) += (dy.array() * nc.xhat.array()).colwise().sum().matrix();
        gvec(grad, b_off, D) += dy.colwise().sum();
        Mat dxhat = dy.array().rowwise() * cvec(g_off, D).array();
        Mat dx(N, D);
        for (int n = 0; n < N; ++n) {
            const Scalar m1 = dxhat.row(n).mean();
            const Scalar m2 = (dxhat.row(n).array() * nc.xhat.row(n).array()).mean();
            dx.row(n) = nc.inv_sigma(n) * (dxhat.row(n).array() - m1 - nc.xhat.row(n).array() * m2);
        }
        return dx;
    }

    void check_input(std::span<const int> tokens, int batch, int seq_len) const {
        if (batch <= 0 || seq_len <= 0 || seq_len > shape_.context) {
            throw DimensionError("sequence length exceeds the model context");
        }
        if (tokens.size() != static_cast<std::size_t>(batch) * seq_len) {
            throw DimensionError("token buffer size does not match batch * seq_len");
        }
        for (int t : tokens) {
            if (t < 0 || t >= shape_.vocab) throw DimensionError("token id outside the model vocabulary");
        }
    }

    void forward(std::span<const int> tokens, int batch, int seq_len, Cache& c) const {
        check_input(tokens, batch, seq_len);
        const int N = batch * seq_len;
        const int D = shape_.width, F = shape_.hidden(), H = shape_.heads, dh = shape_.head_dim();
        const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
        const auto tok = cmat(off_.tok, shape_.vocab, D);
        const auto pos = cmat(off_.pos, shape_.context, D);

        Mat x(N, D);
        for (int n = 0; n < N; ++n) x.row(n) = tok.row(tokens[n]) + pos.row(n % seq_len);

        c.blocks.resize(shape_.layers);
        for (int l = 0; l < shape_.layers; ++l) {
            const auto& L = off_.blocks[l];
            auto& bc = c.blocks[l];
            bc.h = layer_norm(x, L.ln1_g, L.ln1_b, bc.ln1);
            bc.qkv = bc.h * cmat(L.wqkv, D, 3 * D);
            bc.qkv.rowwise() += cvec(L.bqkv, 3 * D);
            bc.o.resize(N, D);
            bc.probs.resize(static_cast<std::size_t>(batch) * H);
            for (int b = 0; b < batch; ++b) {
                for (int hd = 0; hd < H; ++hd) {
                    const auto q = bc.qkv.block(b * seq_len, hd * dh, seq_len, dh);
                    const auto k = bc.qkv.block(b * seq_len, D + hd * dh, seq_len, dh);
                    const auto v = bc.qkv.block(b * seq_len, 2 * D + hd * dh, seq_len, dh);
                    Mat s = (q * k.transpose()) * scale;
                    for (int i = 0; i < seq_len; ++i) {
                        const Scalar mx = s.row(i).head(i + 1).maxCoeff();
                        Scalar z = 0;
                        for (int j = 0; j <= i; ++j) {
                            s(i, j) = std::exp(s(i, j) - mx);
                            z += s(i, j);
                        }
                        for (int j = 0; j <= i; ++j) s(i, j) /= z;
                        for (int j = i + 1; j < seq_len; ++j) s(i, j) = 0;
                    }
                    bc.o.block(b * seq_len, hd * dh, seq_len, dh).noalias() = s * v;
                    bc.probs[static_cast<std::size_t>(b) * H + hd] = std::move(s);
                }
            }
            Mat a = bc.o * cmat(L.wo, D, D);
            a.rowwise() += cvec(L.bo, D);
            x += a;
            bc.h2 = layer_norm(x, L.ln2_g, L.ln2_b, bc.ln2);
            bc.u = bc.h2 * cmat(L.w1, D, F);
            bc.u.rowwise() += cvec(L.b1, F);
            Mat r = bc.u.cwiseMax(Scalar(0));
            Mat m = r * cmat(L.w2, F, D);
            m.rowwise() += cvec(L.b2, D);
            x += m;
        }
        c.hf = layer_norm(x, off_.lnf_g, off_.lnf_b, c.lnf);
        c.logits = c.hf * cmat(off_.wout, D, shape_.vocab);
        c.logits.rowwise() += cvec(off_.bout, shape_.vocab);
    }

    void backward(std::span<const int> tokens, int batch, int seq_len, const Cache& c, const Mat& dlogits,
                  Buffer& grad) const {
        const int N = batch * seq_len;
        const int D = shape_.width, F = shape_.hidden(), H = shape_.heads, dh = shape_.head_dim();
        const int V = shape_.vocab;
        const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

        gmat(grad, off_.wout, D, V).noalias() += c.hf.transpose() * dlogits;
        gvec(grad, off_.bout, V) += dlogits.colwise().sum();
        Mat dhf = dlogits * cmat(off_.wout, D, V).transpose();
        Mat dx = layer_norm_backward(dhf, c.lnf, off_.lnf_g, off_.lnf_b, grad);

        for (int l = shape_.layers - 1; l >= 0; --l) {
            const auto& L = off_.blocks[l];
            const auto& bc = c.blocks[l];

            // MLP branch.
            Mat r = bc.u.cwiseMax(Scalar(0));
            gmat(grad, L.w2, F, D).noalias() += r.transpose() * dx;
            gvec(grad, L.b2, D) += dx.colwise().sum();
            Mat du = dx * cmat(L.w2, F, D).transpose();
            du = (bc.u.array() > Scalar(0)).select(du, Scalar(0));
            gmat(grad, L.w1, D, F).noalias() += bc.h2.transpose() * du;
            gvec(grad, L.b1, F) += du.colwise().sum();
            Mat dh2 = du * cmat(L.w1, D, F).transpose();
            dx += layer_norm_backward(dh2, bc.ln2, L.ln2_g, L.ln2_b, grad);

            // Attention branch.
            gmat(grad, L.wo, D, D).noalias() += bc.o.transpose() * dx;
            gvec(grad, L.bo, D) += dx.colwise().sum();
            Mat dout = dx * cmat(L.wo, D, D).transpose();
            Mat dqkv(N, 3 * D);
            for (int b = 0; b < batch; ++b) {
                for (int hd = 0; hd < H; ++hd) {
                    const Mat& p = bc.probs[static_cast<std::size_t>(b) * H + hd];
                    const auto q = bc.qkv.block(b * seq_len, hd * dh, seq_len, dh);
                    const auto k = bc.qkv.block(b * seq_len, D + hd * dh, seq_len, dh);
                    const auto v = bc.qkv.block(b * seq_len, 2 * D + hd * dh, seq_len, dh);
                    const auto dob = dout.block(b * seq_len, hd * dh, seq_len, dh);
                    Mat dp = dob * v.transpose();
                    dqkv.block(b * seq_len, 2 * D + hd * dh, seq_len, dh).noalias() = p.transpose() * dob;
                    Mat ds(seq_len, seq_len);
                    for (int i = 0; i < seq_len; ++i) {
                        const Scalar dot = (dp.row(i).array() * p.row(i).array()).sum();
                        ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
                    }
                    ds *= scale;
                    dqkv.block(b * seq_len, hd * dh, seq_len, dh).noalias() = ds * k;
                    dqkv.block(b * seq_len, D + hd * dh, seq_len, dh).noalias() = ds.transpose() * q;
                }
            }
            gmat(grad, L.wqkv, D, 3 * D).noalias() += bc.h.transpose() * dqkv;
            gvec(grad, L.bqkv, 3 * D) += dqkv.colwise().sum();
            Mat dh = dqkv * cmat(L.wqkv, D, 3 * D).transpose();
            dx += layer_norm_backward(dh, bc.ln1, L.ln1_g, L.ln1_b, grad);
        }

        auto dtok = gmat(grad, off_.tok, V, D);
        auto dpos = gmat(grad, off_.pos, shape_.context, D);
        for (int n = 0; n < N; ++n) {
            dtok.row(tokens[n]) += dx.row(n);
            dpos.row(n % seq_len) += dx.row(n);
        }
    }

    TransformerShape shape_{};
    Offsets off_{};
    std::size_t total_ = 0;
    Buffer params_;
};

}  // namespace uprobe::toy
