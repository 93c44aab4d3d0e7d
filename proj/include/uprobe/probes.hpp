#pragma once

// Linear and one-hidden-layer probes on frozen embeddings.
//
// Binary probes output a logistic probability; regression probes output a
// real value. Training uses Adam with early stopping on validation loss and
// returns the weights of the best validation epoch.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "uprobe/dataset.hpp"
#include "uprobe/envelope.hpp"
#include "uprobe/errors.hpp"
#include "uprobe/optim.hpp"
#include "uprobe/rng.hpp"

namespace uprobe {

enum class ProbeKind { linear, mlp };
enum class ProbeTask { binary, regression };
enum class ProbeLoss { cross_entropy, mse, mse_pu };

struct ProbeConfig {
    ProbeKind kind = ProbeKind::linear;
    int hidden_dim = 2048;
    ProbeTask task = ProbeTask::binary;
    double learning_rate = 1e-5;
    int batch_size = 32;
    int max_epochs = 100;
    int patience = 3;
    ProbeLoss loss = ProbeLoss::cross_entropy;
    double pu_alpha = 1.0;
    bool zscore = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (kind == ProbeKind::mlp && hidden_dim <= 0) throw ConfigError("mlp probes need hidden_dim > 0");
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
        if (batch_size <= 0) throw ConfigError("batch_size must be > 0");
        if (max_epochs <= 0) throw ConfigError("max_epochs must be > 0");
        if (patience < 1) throw ConfigError("patience must be >= 1");
        if (pu_alpha < 0.0) throw ConfigError("pu_alpha must be >= 0");
        if (task == ProbeTask::binary && loss != ProbeLoss::cross_entropy) {
            throw ConfigError("binary probes train with cross_entropy");
        }
        if (task == ProbeTask::regression && loss == ProbeLoss::cross_entropy) {
            throw ConfigError("regression probes train with mse or mse_pu");
        }
    }
};

// (x - y)^2 + alpha * max(y - x, 0)^2: underestimates cost extra.
inline double pu_loss(double prediction, double target, double alpha) {
    const double d = prediction - target;
    const double under = std::max(target - prediction, 0.0);
    return d * d + alpha * under * under;
}

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;

    bool operator==(const EpochStats&) const = default;
};

// Design matrix (rows = examples) and targets for one embedding layer.
struct ProbeData {
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
};

inline ProbeData make_probe_data(const std::vector<LabeledExample>& examples, std::int32_t layer, ProbeTask task) {
    if (examples.empty()) throw DataError("no examples");
    const auto dim = examples.front().embedding(layer).size();
    ProbeData d{Eigen::MatrixXd(examples.size(), dim), Eigen::VectorXd(examples.size())};
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto& e = examples[i];
        const auto& v = e.embedding(layer);
        if (v.size() != dim) throw DimensionError("inconsistent embedding dims across examples");
        for (std::size_t j = 0; j < dim; ++j) d.x(i, j) = v[j];
        if (task == ProbeTask::binary) {
            if (!e.label) throw DataError("binary probe needs labeled examples");
            d.y(i) = *e.label;
        } else {
            if (!e.target) throw DataError("regression probe needs examples with targets");
            d.y(i) = *e.target;
        }
    }
    return d;
}

class ProbeModel {
public:
    ProbeModel() = default;

    ProbeModel(ProbeConfig cfg, int input_dim) : cfg_(cfg), input_dim_(input_dim) {
        cfg_.validate();
        if (input_dim <= 0) throw DimensionError("probe input dim must be > 0");
        params_.assign(parameter_count(), 0.0);
        mean_ = Eigen::RowVectorXd::Zero(input_dim);
        inv_std_ = Eigen::RowVectorXd::Ones(input_dim);
    }

    const ProbeConfig& config() const { return cfg_; }
    int input_dim() const { return input_dim_; }
    int hidden() const { return cfg_.kind == ProbeKind::mlp ? cfg_.hidden_dim : 0; }

    std::size_t parameter_count() const {
        const std::size_t d = input_dim_;
        if (cfg_.kind == ProbeKind::linear) return d + 1;
        const std::size_t h = cfg_.hidden_dim;
        return h * d + h + h + 1;
    }

    std::vector<double>& parameters() { return params_; }
    const std::vector<double>& parameters() const { return params_; }

    // Uniform in +-1/sqrt(fan_in) for every weight and bias.
    void init(std::uint64_t seed) {
        Rng rng(derive_seed(seed, "probe-init"));
        const double b_in = 1.0 / std::sqrt(static_cast<double>(input_dim_));
        if (cfg_.kind == ProbeKind::linear) {
            for (auto& p : params_) p = rng.uniform(-b_in, b_in);
            return;
        }
        const std::size_t h = cfg_.hidden_dim, d = input_dim_;
        const double b_h = 1.0 / std::sqrt(static_cast<double>(h));
        for (std::size_t i = 0; i < h * d + h; ++i) params_[i] = rng.uniform(-b_in, b_in);
        for (std::size_t i = h * d + h; i < params_.size(); ++i) params_[i] = rng.uniform(-b_h, b_h);
    }

    void set_normalization(Eigen::RowVectorXd mean, Eigen::RowVectorXd inv_std) {
        mean_ = std::move(mean);
        inv_std_ = std::move(inv_std);
    }
    const Eigen::RowVectorXd& norm_mean() const { return mean_; }
    const Eigen::RowVectorXd& norm_inv_std() const { return inv_std_; }

    // Raw output (logit for binary, value for regression) for each row of x.
    Eigen::VectorXd raw_outputs(const Eigen::MatrixXd& x) const {
        Eigen::MatrixXd u;
        return forward(normalize(x), u);
    }

    Eigen::VectorXd scores(const Eigen::MatrixXd& x) const {
        Eigen::VectorXd z = raw_outputs(x);
        if (cfg_.task == ProbeTask::binary) z = z.unaryExpr([](double v) { return sigmoid(v); });
        return z;
    }

    // Class-1 probability (binary) or regression value for one embedding.
    double predict(std::span<const float> embedding) const {
        if (static_cast<int>(embedding.size()) != input_dim_) {
            throw DimensionError("embedding dim " + std::to_string(embedding.size()) + " does not match probe input " +
                                 std::to_string(input_dim_));
        }
        Eigen::MatrixXd x(1, input_dim_);
        for (int j = 0; j < input_dim_; ++j) x(0, j) = embedding[j];
        return scores(x)(0);
    }

    // Mean loss over rows and its gradient w.r.t. the flat parameters.
    double loss_and_gradient(const Eigen::MatrixXd& x_raw, const Eigen::VectorXd& y, std::vector<double>* grad) const {
        const Eigen::MatrixXd x = normalize(x_raw);
        Eigen::MatrixXd u;
        const Eigen::VectorXd z = forward(x, u);
        const double n = static_cast<double>(x.rows());
        Eigen::VectorXd dz(z.size());
        double loss = 0.0;
        for (Eigen::Index i = 0; i < z.size(); ++i) {
            switch (cfg_.loss) {
                case ProbeLoss::cross_entropy:
                    // softplus(z) - y z, stable for large |z|
                    loss += std::max(z(i), 0.0) + std::log1p(std::exp(-std::abs(z(i)))) - y(i) * z(i);
                    dz(i) = (sigmoid(z(i)) - y(i)) / n;
                    break;
                case ProbeLoss::mse:
                    loss += (z(i) - y(i)) * (z(i) - y(i));
                    dz(i) = 2.0 * (z(i) - y(i)) / n;
                    break;
                case ProbeLoss::mse_pu:
                    loss += pu_loss(z(i), y(i), cfg_.pu_alpha);
                    dz(i) = (2.0 * (z(i) - y(i)) - 2.0 * cfg_.pu_alpha * std::max(y(i) - z(i), 0.0)) / n;
                    break;
            }
        }
        loss /= n;
        if (!grad) return loss;

        Eigen::VectorXd g = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(params_.size()));
        const int d = input_dim_;
        if (cfg_.kind == ProbeKind::linear) {
            g.head(d) = x.transpose() * dz;
            g(d) = dz.sum();
        } else {
            const int h = cfg_.hidden_dim;
            const Eigen::VectorXd p = aligned_params();
            const auto w2 = p.segment(h * d + h, h);
            // W1 is stored row-major (h x d) so each hidden unit's weights are contiguous.
            Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> gw1(g.data(), h, d);
            const Eigen::MatrixXd r = u.cwiseMax(0.0);
            g.segment(h * d + h, h) = r.transpose() * dz;
            g(h * d + 2 * h) = dz.sum();
            Eigen::MatrixXd du = dz * w2.transpose();
            du = (u.array() > 0.0).select(du, 0.0);
            gw1 = du.transpose() * x;
            g.segment(h * d, h) = du.colwise().sum().transpose();
        }
        grad->assign(g.data(), g.data() + g.size());
        return loss;
    }

    double loss(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) const { return loss_and_gradient(x, y, nullptr); }

    std::vector<EpochStats> curve;
    int best_epoch = -1;

private:
    static double sigmoid(double z) {
        return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    }

    Eigen::MatrixXd normalize(const Eigen::MatrixXd& x) const {
        if (x.cols() != input_dim_) throw DimensionError("input dim does not match the probe");
        if (!cfg_.zscore) return x;
        return (x.rowwise() - mean_).array().rowwise() * inv_std_.array();
    }

    // Copy into Eigen-owned (aligned) storage; vectorized results then do not
    // depend on where the std::vector happened to be allocated.
    Eigen::VectorXd aligned_params() const {
        return Eigen::Map<const Eigen::VectorXd>(params_.data(), static_cast<Eigen::Index>(params_.size()));
    }

    Eigen::VectorXd forward(const Eigen::MatrixXd& x, Eigen::MatrixXd& u) const {
        const int d = input_dim_;
        const Eigen::VectorXd p = aligned_params();
        if (cfg_.kind == ProbeKind::linear) {
            return (x * p.head(d)).array() + p(d);
        }
        const int h = cfg_.hidden_dim;
        const auto w1 = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            p.data(), h, d);
        const auto b1 = p.segment(h * d, h).transpose();
        const auto w2 = p.segment(h * d + h, h);
        u = x * w1.transpose();
        u.rowwise() += b1;
        return (u.cwiseMax(0.0) * w2).array() + params_[h * d + 2 * h];
    }

    ProbeConfig cfg_{};
    int input_dim_ = 0;
    std::vector<double> params_;
    Eigen::RowVectorXd mean_, inv_std_;
};

inline ProbeModel train_probe(const ProbeData& train, const ProbeData& val, const ProbeConfig& cfg) {
    cfg.validate();
    if (train.x.rows() == 0 || val.x.rows() == 0) throw DataError("train and validation sets must be nonempty");
    if (train.x.cols() != val.x.cols()) throw DimensionError("train and validation embedding dims differ");
    if (cfg.task == ProbeTask::binary) {
        const double ones = train.y.sum();
        if (ones == 0.0 || ones == static_cast<double>(train.y.size())) {
            throw DataError("binary probe training set contains a single class");
        }
    }

    ProbeModel model(cfg, static_cast<int>(train.x.cols()));
    model.init(cfg.seed);
    if (cfg.zscore) {
        const Eigen::RowVectorXd mean = train.x.colwise().mean();
        const Eigen::RowVectorXd var = (train.x.rowwise() - mean).array().square().colwise().mean();
        model.set_normalization(mean, var.unaryExpr([](double v) { return v > 0 ? 1.0 / std::sqrt(v) : 1.0; }));
    }

    AdamSettings settings;
    settings.learning_rate = cfg.learning_rate;
    Adam<double> adam(model.parameter_count(), settings);
    Rng rng(derive_seed(cfg.seed, "probe-shuffle"));

    const Eigen::Index n = train.x.rows();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::vector<double> grad;
    std::vector<double> best = model.parameters();
    double best_val = std::numeric_limits<double>::infinity();
    int since_best = 0;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
            const Eigen::Index bs = std::min<Eigen::Index>(cfg.batch_size, n - start);
            Eigen::MatrixXd xb(bs, train.x.cols());
            Eigen::VectorXd yb(bs);
            for (Eigen::Index i = 0; i < bs; ++i) {
                xb.row(i) = train.x.row(order[static_cast<std::size_t>(start + i)]);
                yb(i) = train.y(order[static_cast<std::size_t>(start + i)]);
            }
            const double loss = model.loss_and_gradient(xb, yb, &grad);
            if (!std::isfinite(loss)) {
                throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch starting " +
                                    std::to_string(start) + " (lr " + std::to_string(cfg.learning_rate) + ")");
            }
            epoch_loss += loss * static_cast<double>(bs);
            adam.step(std::span<double>(model.parameters()), std::span<const double>(grad));
        }
        const double val_loss = model.loss(val.x, val.y);
        if (!std::isfinite(val_loss)) {
            throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch));
        }
        model.curve.push_back({epoch, epoch_loss / static_cast<double>(n), val_loss});
        if (val_loss < best_val) {
            best_val = val_loss;
            best = model.parameters();
            model.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    model.parameters() = best;
    return model;
}

inline ProbeModel train_probe(const std::vector<LabeledExample>& train, const std::vector<LabeledExample>& val,
                              std::int32_t layer, const ProbeConfig& cfg) {
    return train_probe(make_probe_data(train, layer, cfg.task), make_probe_data(val, layer, cfg.task), cfg);
}

// --- serialization: payload variant 3 plus a JSON sidecar ---------------------

inline std::string to_string(ProbeKind k) { return k == ProbeKind::linear ? "linear" : "mlp"; }
inline std::string to_string(ProbeTask t) { return t == ProbeTask::binary ? "binary" : "regression"; }
inline std::string to_string(ProbeLoss l) {
    switch (l) {
        case ProbeLoss::cross_entropy: return "cross_entropy";
        case ProbeLoss::mse: return "mse";
        case ProbeLoss::mse_pu: return "mse_pu";
    }
    return "?";
}

inline nlohmann::json probe_config_json(const ProbeConfig& c) {
    return {{"kind", to_string(c.kind)},       {"hidden_dim", c.hidden_dim},
            {"task", to_string(c.task)},       {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},      {"max_epochs", c.max_epochs},
            {"patience", c.patience},          {"loss", to_string(c.loss)},
            {"pu_alpha", c.pu_alpha},          {"zscore", c.zscore},
            {"seed", c.seed}};
}

inline ProbeConfig probe_config_from_json(const nlohmann::json& j) {
    ProbeConfig c;
    c.kind = j.at("kind") == "mlp" ? ProbeKind::mlp : ProbeKind::linear;
    c.hidden_dim = j.at("hidden_dim");
    c.task = j.at("task") == "regression" ? ProbeTask::regression : ProbeTask::binary;
    c.learning_rate = j.at("learning_rate");
    c.batch_size = j.at("batch_size");
    c.max_epochs = j.at("max_epochs");
    c.patience = j.at("patience");
    const std::string loss = j.at("loss");
    c.loss = loss == "mse" ? ProbeLoss::mse : loss == "mse_pu" ? ProbeLoss::mse_pu : ProbeLoss::cross_entropy;
    c.pu_alpha = j.at("pu_alpha");
    c.zscore = j.at("zscore");
    c.seed = j.at("seed");
    return c;
}

inline nlohmann::json probe_sidecar(const ProbeModel& m) {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& e : m.curve) curve.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}});
    return {{"config", probe_config_json(m.config())},
            {"input_dim", m.input_dim()},
            {"best_epoch", m.best_epoch},
            {"curve", curve}};
}

struct ProbeModelCodec {
    using value_type = ProbeModel;
    static constexpr int payload = static_cast<int>(PayloadVariant::probe_model);

    static void encode(const ProbeModel& m, detail::ByteWriter& w) {
        w.put_string(probe_sidecar(m).dump());
        const auto& mean = m.norm_mean();
        const auto& inv = m.norm_inv_std();
        w.put_array<double>(std::span<const double>(mean.data(), static_cast<std::size_t>(mean.size())));
        w.put_array<double>(std::span<const double>(inv.data(), static_cast<std::size_t>(inv.size())));
        w.put(static_cast<std::uint64_t>(m.parameters().size()));
        w.put_array<double>(m.parameters());
    }

    static ProbeModel decode(detail::ByteReader& r, const FileHeader&) {
        nlohmann::json side;
        try {
            side = nlohmann::json::parse(r.get_string());
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(ParseError::Reason::malformed, std::string("probe metadata: ") + e.what());
        }
        const int dim = side.at("input_dim");
        ProbeModel m(probe_config_from_json(side.at("config")), dim);
        auto mean = r.get_array<double>(dim);
        auto inv = r.get_array<double>(dim);
        m.set_normalization(Eigen::Map<Eigen::RowVectorXd>(mean.data(), dim),
                            Eigen::Map<Eigen::RowVectorXd>(inv.data(), dim));
        const auto n = r.get<std::uint64_t>();
        if (n != m.parameter_count()) throw ParseError(ParseError::Reason::malformed, "probe parameter count mismatch");
        m.parameters() = r.get_array<double>(n);
        m.best_epoch = side.at("best_epoch");
        for (const auto& e : side.at("curve")) m.curve.push_back({e.at("epoch"), e.at("train_loss"), e.at("val_loss")});
        return m;
    }

    static nlohmann::json to_json(const ProbeModel&) {
        throw ConfigError("probe models are stored in binary form only");
    }
    static ProbeModel from_json(const nlohmann::json&, const FileHeader&) {
        throw ParseError(ParseError::Reason::malformed, "probe models are stored in binary form only");
    }
    static void check(const ProbeModel&, const FileHeader&) {}
};

}  // namespace uprobe
