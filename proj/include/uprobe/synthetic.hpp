#pragma once

// Synthetic epistemic/aleatoric bit-question world, a toy language model
// trained on k-shot episodes drawn from it, and the in-context copying test.
//
// Token alphabet: 0, 1, PAD, SEP. A question/answer pair is encoded as
//   [type bit] [B index bits, MSB first] [answer bit]
// and every pair inside an episode is preceded by SEP.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uprobe/envelope.hpp"
#include "uprobe/errors.hpp"
#include "uprobe/optim.hpp"
#include "uprobe/rng.hpp"
#include "uprobe/toy_lm.hpp"

namespace uprobe::synthetic {

inline constexpr int kZero = 0;
inline constexpr int kOne = 1;
inline constexpr int kPad = 2;
inline constexpr int kSep = 3;
inline constexpr int kVocab = 4;

enum class QuestionType : std::uint8_t { epistemic = 0, aleatoric = 1 };

struct ToyQuestion {
    QuestionType qtype = QuestionType::epistemic;
    std::uint32_t index = 0;
    std::optional<int> fixed_answer;  // present iff epistemic
};

struct ToyWorld {
    int bits = 10;
    double duplication_rate = 0.6;
    int shots = 4;
    std::uint64_t seed = 0;
    std::vector<ToyQuestion> questions;

    int pair_length() const { return bits + 2; }
    // Longest episode: `shots` examples plus the target, each with a leading SEP.
    int context_length() const { return (shots + 1) * (bits + 3); }
};

inline ToyWorld generate_question_set(int bits, int n_questions, double epistemic_fraction, std::uint64_t seed) {
    if (bits <= 0 || bits > 24) throw ConfigError("question bit-width must be in [1, 24]");
    if (n_questions <= 0) throw ConfigError("question count must be positive");
    if (!(epistemic_fraction > 0.0 && epistemic_fraction < 1.0)) {
        throw ConfigError("epistemic fraction must lie strictly between 0 and 1");
    }
    const std::uint64_t capacity = std::uint64_t{1} << bits;
    if (static_cast<std::uint64_t>(n_questions) > capacity) {
        throw ConfigError("requested " + std::to_string(n_questions) + " questions but only " +
                          std::to_string(capacity) + " distinct indices exist at this bit-width");
    }

    Rng rng(derive_seed(seed, "world"));
    // Partial Fisher-Yates over the index space for distinct indices.
    std::vector<std::uint32_t> pool(capacity);
    std::iota(pool.begin(), pool.end(), 0u);
    for (int i = 0; i < n_questions; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(capacity - i));
        std::swap(pool[i], pool[j]);
    }

    const int n_epistemic = std::clamp(static_cast<int>(std::lround(epistemic_fraction * n_questions)), 0, n_questions);
    ToyWorld world;
    world.bits = bits;
    world.seed = seed;
    world.questions.resize(n_questions);
    for (int i = 0; i < n_questions; ++i) {
        auto& q = world.questions[i];
        q.index = pool[i];
        if (i < n_epistemic) {
            q.qtype = QuestionType::epistemic;
            q.fixed_answer = static_cast<int>(rng.below(2));
        } else {
            q.qtype = QuestionType::aleatoric;
        }
    }
    return world;
}

// Question tokens without the answer: type bit then index bits.
inline std::vector<int> encode_question(const ToyQuestion& q, int bits) {
    std::vector<int> out;
    out.reserve(bits + 1);
    out.push_back(static_cast<int>(q.qtype));
    for (int b = bits - 1; b >= 0; --b) out.push_back(static_cast<int>((q.index >> b) & 1u));
    return out;
}

inline std::vector<int> encode_pair(const ToyQuestion& q, int answer, int bits) {
    auto out = encode_question(q, bits);
    out.push_back(answer);
    return out;
}

inline int realize_answer(const ToyQuestion& q, Rng& rng) {
    return q.fixed_answer ? *q.fixed_answer : static_cast<int>(rng.below(2));
}

struct Episode {
    std::vector<int> tokens;
    std::size_t target = 0;              // index into world.questions
    std::vector<std::size_t> examples;   // indices into world.questions, in order
    std::vector<int> example_answers;
    int target_answer = 0;
    bool duplicated = false;
};

// One episode: between 0 and `shots` examples (at least one when the target is
// duplicated), then the target pair. Non-duplicated episodes never contain the
// target among their examples.
// `shots` fixes the example count (training batches share one count so they
// pack tightly); by default it is drawn uniformly from [0, world.shots].
inline Episode sample_episode(const ToyWorld& world, Rng& rng, std::optional<int> shots = std::nullopt) {
    const auto n = world.questions.size();
    Episode ep;
    ep.target = static_cast<std::size_t>(rng.below(n));
    ep.duplicated = rng.bernoulli(world.duplication_rate);
    int m = shots ? *shots : static_cast<int>(rng.below(static_cast<std::uint64_t>(world.shots) + 1));
    if (ep.duplicated && m == 0) m = 1;
    if (n == 1 && !ep.duplicated) m = 0;
    const int dup_slot = ep.duplicated ? static_cast<int>(rng.below(static_cast<std::uint64_t>(m))) : -1;
    for (int i = 0; i < m; ++i) {
        std::size_t qi;
        if (i == dup_slot) {
            qi = ep.target;
        } else {
            do {
                qi = static_cast<std::size_t>(rng.below(n));
            } while (qi == ep.target);
        }
        ep.examples.push_back(qi);
    }
    ep.tokens.reserve(static_cast<std::size_t>(m + 1) * (world.bits + 3));
    for (std::size_t qi : ep.examples) {
        const int a = realize_answer(world.questions[qi], rng);
        ep.example_answers.push_back(a);
        ep.tokens.push_back(kSep);
        const auto pair = encode_pair(world.questions[qi], a, world.bits);
        ep.tokens.insert(ep.tokens.end(), pair.begin(), pair.end());
    }
    ep.target_answer = realize_answer(world.questions[ep.target], rng);
    ep.tokens.push_back(kSep);
    const auto pair = encode_pair(world.questions[ep.target], ep.target_answer, world.bits);
    ep.tokens.insert(ep.tokens.end(), pair.begin(), pair.end());
    return ep;
}

inline std::vector<int> sample_training_stream(const ToyWorld& world, std::size_t length, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "stream"));
    std::vector<int> stream;
    stream.reserve(length);
    while (stream.size() < length) {
        const auto ep = sample_episode(world, rng);
        stream.insert(stream.end(), ep.tokens.begin(), ep.tokens.end());
    }
    stream.resize(length);
    return stream;
}

// Which next-token positions contribute to the training loss.
enum class LossPositions { answers, all };

struct ToyTrainConfig {
    int width = 64;
    int layers = 2;
    int heads = 4;
    long steps = 6000;
    int batch_size = 32;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    double final_lr_fraction = 0.1;
    long warmup_steps = 200;
    long divergence_window = 1000;
    int log_every = 50;
    LossPositions loss_positions = LossPositions::all;
    std::uint64_t seed = 0;
};

struct ToyLM {
    toy::Transformer<float> net;
    ToyTrainConfig config;
    std::vector<std::pair<long, double>> loss_curve;  // (step, mean loss over the logging window)
};

// Packs episodes into a right-padded batch; targets at PAD positions get zero weight.
struct PackedBatch {
    std::vector<int> tokens, targets;
    std::vector<float> weights;
};

inline PackedBatch pack_episodes(const std::vector<Episode>& eps, int seq_len, int bits,
                                 LossPositions positions = LossPositions::all) {
    const int pair_span = bits + 3;
    PackedBatch pb;
    const std::size_t N = eps.size() * static_cast<std::size_t>(seq_len);
    pb.tokens.assign(N, kPad);
    pb.targets.assign(N, kPad);
    pb.weights.assign(N, 0.0f);
    for (std::size_t b = 0; b < eps.size(); ++b) {
        const auto& t = eps[b].tokens;
        if (static_cast<int>(t.size()) > seq_len) throw DimensionError("episode longer than the model context");
        for (std::size_t i = 0; i < t.size(); ++i) pb.tokens[b * seq_len + i] = t[i];
        for (std::size_t i = 0; i + 1 < t.size(); ++i) {
            pb.targets[b * seq_len + i] = t[i + 1];
            // The answer bit is the last token of each SEP-led pair.
            const bool answer = static_cast<int>((i + 1) % pair_span) == pair_span - 1;
            if (positions == LossPositions::all || answer) pb.weights[b * seq_len + i] = 1.0f;
        }
    }
    return pb;
}

using ProgressFn = std::function<void(long step, double loss)>;

inline ToyLM train_toy_lm(const ToyWorld& world, const ToyTrainConfig& cfg, const ProgressFn& progress = {}) {
    if (cfg.steps <= 0 || cfg.batch_size <= 0 || !(cfg.learning_rate > 0)) {
        throw ConfigError("toy training needs positive steps, batch size and learning rate");
    }
    toy::TransformerShape shape;
    shape.vocab = kVocab;
    shape.context = world.context_length();
    shape.width = cfg.width;
    shape.layers = cfg.layers;
    shape.heads = cfg.heads;

    ToyLM lm{toy::Transformer<float>(shape), cfg, {}};
    lm.net.init(derive_seed(cfg.seed, "toy-init"));
    Rng data_rng(derive_seed(cfg.seed, "toy-data"));
    AdamSettings adam_settings;
    adam_settings.learning_rate = cfg.learning_rate;
    adam_settings.weight_decay = cfg.weight_decay;
    Adam<float> adam(lm.net.parameter_count(), adam_settings);
    adam.set_decay_mask(lm.net.decay_mask());

    std::vector<float> grad;
    std::vector<Episode> eps(cfg.batch_size);
    double initial_loss = -1.0;
    long above_initial = 0;
    double window_sum = 0.0;
    int window_n = 0;

    for (long step = 0; step < cfg.steps; ++step) {
        const int shots = static_cast<int>(data_rng.below(static_cast<std::uint64_t>(world.shots) + 1));
        int seq_len = 0;
        for (auto& ep : eps) {
            ep = sample_episode(world, data_rng, shots);
            seq_len = std::max(seq_len, static_cast<int>(ep.tokens.size()));
        }
        const auto pb = pack_episodes(eps, seq_len, world.bits, cfg.loss_positions);
        const float loss = lm.net.loss_and_gradient(pb.tokens, pb.targets, pb.weights, cfg.batch_size, seq_len, grad);
        if (!std::isfinite(loss)) {
            throw TrainingError("toy LM loss became non-finite at step " + std::to_string(step));
        }
        if (initial_loss < 0) initial_loss = loss;
        above_initial = loss > initial_loss ? above_initial + 1 : 0;
        if (above_initial >= cfg.divergence_window) {
            std::string curve;
            for (const auto& [s, l] : lm.loss_curve) curve += " " + std::to_string(s) + ":" + std::to_string(l);
            throw TrainingError("toy LM diverged: loss above its initial value for " +
                                std::to_string(cfg.divergence_window) + " consecutive steps; curve:" + curve);
        }
        double lr = cosine_lr(cfg.learning_rate, step, cfg.steps, cfg.final_lr_fraction);
        if (step < cfg.warmup_steps) lr *= static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
        adam.step(lm.net.parameters(), grad, lr);

        window_sum += loss;
        ++window_n;
        if (window_n == cfg.log_every || step + 1 == cfg.steps) {
            lm.loss_curve.emplace_back(step, window_sum / window_n);
            if (progress) progress(step, window_sum / window_n);
            window_sum = 0.0;
            window_n = 0;
        }
    }
    return lm;
}

// Next-token distribution after `prompt` under the toy model.
inline std::vector<double> next_distribution(const toy::Transformer<float>& net, const std::vector<int>& prompt) {
    const auto logits = net.logits(prompt, 1, static_cast<int>(prompt.size()));
    const auto row = logits.row(logits.rows() - 1);
    const double mx = row.maxCoeff();
    std::vector<double> p(row.size());
    double z = 0.0;
    for (Eigen::Index v = 0; v < row.size(); ++v) {
        p[v] = std::exp(static_cast<double>(row(v)) - mx);
        z += p[v];
    }
    for (auto& x : p) x /= z;
    return p;
}

inline std::vector<int> plain_prompt(const ToyQuestion& q, int bits) {
    std::vector<int> out{kSep};
    const auto body = encode_question(q, bits);
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

// SEP q a SEP q: the same question answered `answer` placed before the query.
inline std::vector<int> context_prompt(const ToyQuestion& q, int answer, int bits) {
    std::vector<int> out{kSep};
    const auto pair = encode_pair(q, answer, bits);
    out.insert(out.end(), pair.begin(), pair.end());
    const auto tail = plain_prompt(q, bits);
    out.insert(out.end(), tail.begin(), tail.end());
    return out;
}

struct IcltToyRow {
    QuestionType qtype;
    std::uint32_t index;
    int provided_answer;
    bool agrees_with_fixed;  // meaningful for epistemic rows only
    double p_before;
    double p_after;
};

struct IcltToySummary {
    double epistemic_agree_p_after = 0, epistemic_contradict_p_after = 0;
    double epistemic_mean_shift = 0, aleatoric_mean_shift = 0;
    double aleatoric_mean_abs_dev = 0;  // mean |p_after - 0.5|
    std::size_t n_epistemic = 0, n_aleatoric = 0;
};

struct IcltToyReport {
    std::vector<IcltToyRow> rows;
    IcltToySummary summary;
};

inline IcltToySummary summarize(const std::vector<IcltToyRow>& rows) {
    IcltToySummary s;
    std::size_t n_agree = 0, n_contra = 0;
    for (const auto& r : rows) {
        const double shift = r.p_after - r.p_before;
        if (r.qtype == QuestionType::epistemic) {
            ++s.n_epistemic;
            s.epistemic_mean_shift += shift;
            if (r.agrees_with_fixed) {
                ++n_agree;
                s.epistemic_agree_p_after += r.p_after;
            } else {
                ++n_contra;
                s.epistemic_contradict_p_after += r.p_after;
            }
        } else {
            ++s.n_aleatoric;
            s.aleatoric_mean_shift += shift;
            s.aleatoric_mean_abs_dev += std::abs(r.p_after - 0.5);
        }
    }
    if (s.n_epistemic) s.epistemic_mean_shift /= static_cast<double>(s.n_epistemic);
    if (s.n_aleatoric) {
        s.aleatoric_mean_shift /= static_cast<double>(s.n_aleatoric);
        s.aleatoric_mean_abs_dev /= static_cast<double>(s.n_aleatoric);
    }
    if (n_agree) s.epistemic_agree_p_after /= static_cast<double>(n_agree);
    if (n_contra) s.epistemic_contradict_p_after /= static_cast<double>(n_contra);
    return s;
}

// For each evaluated question and each answer a in {0, 1}: P(a | plain prompt)
// and P(a | prompt preceded by the same question answered a).
inline IcltToyReport iclt_eval_toy(const toy::Transformer<float>& net, const ToyWorld& world, std::size_t n_eval,
                                   std::uint64_t seed) {
    Rng rng(derive_seed(seed, "toy-eval"));
    const auto n = world.questions.size();
    std::vector<std::size_t> chosen;
    if (n_eval <= n) {
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), std::size_t{0});
        rng.shuffle(all);
        chosen.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_eval));
        std::sort(chosen.begin(), chosen.end());
    } else {
        for (std::size_t i = 0; i < n_eval; ++i) chosen.push_back(static_cast<std::size_t>(rng.below(n)));
    }

    IcltToyReport report;
    for (std::size_t qi : chosen) {
        const auto& q = world.questions[qi];
        const auto before = next_distribution(net, plain_prompt(q, world.bits));
        for (int a : {0, 1}) {
            const auto after = next_distribution(net, context_prompt(q, a, world.bits));
            report.rows.push_back({q.qtype, q.index, a, q.fixed_answer && *q.fixed_answer == a, before[a], after[a]});
        }
    }
    report.summary = summarize(report.rows);
    return report;
}

struct NoContextReport {
    double epistemic_accuracy = 0;      // argmax over {0,1} equals the fixed answer
    double aleatoric_mean_entropy = 0;  // bits, over the full toy vocabulary
};

inline NoContextReport no_context_report(const toy::Transformer<float>& net, const ToyWorld& world) {
    NoContextReport r;
    std::size_t ne = 0, na = 0, correct = 0;
    for (const auto& q : world.questions) {
        const auto p = next_distribution(net, plain_prompt(q, world.bits));
        if (q.qtype == QuestionType::epistemic) {
            ++ne;
            const int guess = p[kOne] > p[kZero] ? 1 : 0;
            correct += guess == *q.fixed_answer ? 1 : 0;
        } else {
            ++na;
            double h = 0.0;
            for (double x : p) {
                if (x > 0) h -= x * std::log2(x);
            }
            r.aleatoric_mean_entropy += h;
        }
    }
    if (ne) r.epistemic_accuracy = static_cast<double>(correct) / static_cast<double>(ne);
    if (na) r.aleatoric_mean_entropy /= static_cast<double>(na);
    return r;
}

// --- serialization ------------------------------------------------------------

inline nlohmann::json world_to_json(const ToyWorld& w) {
    nlohmann::json qs = nlohmann::json::array();
    for (const auto& q : w.questions) {
        qs.push_back({{"qtype", static_cast<int>(q.qtype)},
                      {"index", q.index},
                      {"fixed_answer", q.fixed_answer ? nlohmann::json(*q.fixed_answer) : nlohmann::json(nullptr)}});
    }
    return {{"bits", w.bits},
            {"duplication_rate", w.duplication_rate},
            {"shots", w.shots},
            {"seed", w.seed},
            {"questions", qs}};
}

inline ToyWorld world_from_json(const nlohmann::json& j) {
    ToyWorld w;
    w.bits = j.at("bits");
    w.duplication_rate = j.at("duplication_rate");
    w.shots = j.at("shots");
    w.seed = j.at("seed");
    for (const auto& e : j.at("questions")) {
        ToyQuestion q;
        q.qtype = e.at("qtype").get<int>() == 0 ? QuestionType::epistemic : QuestionType::aleatoric;
        q.index = e.at("index");
        if (!e.at("fixed_answer").is_null()) q.fixed_answer = e.at("fixed_answer").get<int>();
        w.questions.push_back(q);
    }
    return w;
}

struct ToyModelCodec {
    using value_type = toy::Transformer<float>;
    static constexpr int payload = static_cast<int>(PayloadVariant::toy_model);

    static void encode(const value_type& net, detail::ByteWriter& w) {
        const auto& s = net.shape();
        const nlohmann::json shape = {{"vocab", s.vocab},   {"context", s.context}, {"width", s.width},
                                      {"layers", s.layers}, {"heads", s.heads},     {"mlp_mult", s.mlp_mult}};
        w.put_string(shape.dump());
        w.put(static_cast<std::uint64_t>(net.parameter_count()));
        w.put_array<float>(net.parameters());
    }

    static value_type decode(detail::ByteReader& r, const FileHeader&) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(r.get_string());
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(ParseError::Reason::malformed, std::string("toy model shape: ") + e.what());
        }
        toy::TransformerShape s;
        s.vocab = j.at("vocab");
        s.context = j.at("context");
        s.width = j.at("width");
        s.layers = j.at("layers");
        s.heads = j.at("heads");
        s.mlp_mult = j.at("mlp_mult");
        value_type net(s);
        const auto n = r.get<std::uint64_t>();
        if (n != net.parameter_count()) throw ParseError(ParseError::Reason::malformed, "toy parameter count mismatch");
        const auto p = r.get_array<float>(n);
        std::copy(p.begin(), p.end(), net.parameters().begin());
        return net;
    }

    static nlohmann::json to_json(const value_type&) { throw ConfigError("toy models are stored in binary form only"); }
    static value_type from_json(const nlohmann::json&, const FileHeader&) {
        throw ParseError(ParseError::Reason::malformed, "toy models are stored in binary form only");
    }
    static void check(const value_type&, const FileHeader&) {}
};

}  // namespace uprobe::synthetic
