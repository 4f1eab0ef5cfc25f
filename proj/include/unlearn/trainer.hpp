#pragma once

#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "unlearn/corpus.hpp"
#include "unlearn/eval.hpp"
#include "unlearn/model.hpp"
#include "unlearn/objective.hpp"
#include "unlearn/tokenizer.hpp"

namespace unlearn {

struct HyperParams {
    int epochs = 30;
    int batch_size = 4;
    int grad_accum = 1;
    double learning_rate = 2e-4;
    double weight_decay = 0.001;
    double max_grad_norm = 0.3;
    double warmup_ratio = 0.03;
    std::string schedule = "constant";
    uint64_t seed = 7;

    void validate() const {
        if (epochs < 1 || batch_size < 1 || grad_accum < 1) {
            throw std::invalid_argument("hyperparams: epochs, batch_size and grad_accum must be >= 1");
        }
        if (!(learning_rate >= 0.0) || !(weight_decay >= 0.0) || !(max_grad_norm > 0.0)) {
            throw std::invalid_argument("hyperparams: invalid learning_rate/weight_decay/max_grad_norm");
        }
        if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) {
            throw std::invalid_argument("hyperparams: warmup_ratio must be in [0, 1)");
        }
        if (schedule != "constant") {
            throw std::invalid_argument("hyperparams: unsupported schedule '" + schedule + "'");
        }
    }
};

struct StepStats {
    int64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double clipped_norm = 0.0;
};

struct TrainCurve {
    std::vector<StepStats> steps;

    std::string to_csv() const {
        std::string out = "step,lr,loss,grad_norm,clipped_norm\n";
        char buf[160];
        for (const auto& s : steps) {
            std::snprintf(buf, sizeof(buf), "%lld,%.8g,%.8g,%.8g,%.8g\n", static_cast<long long>(s.step), s.lr,
                          s.loss, s.grad_norm, s.clipped_norm);
            out += buf;
        }
        return out;
    }
};

struct AdamState {
    std::vector<std::vector<double>> m, v;
    int64_t step = 0;

    void init(const Parameters& params, const ParamSelection& sel) {
        m.assign(params.tensors.size(), {});
        v.assign(params.tensors.size(), {});
        for (int id : sel.tensor_ids) {
            m[static_cast<size_t>(id)].assign(params.tensors[static_cast<size_t>(id)].size(), 0.0);
            v[static_cast<size_t>(id)].assign(params.tensors[static_cast<size_t>(id)].size(), 0.0);
        }
        step = 0;
    }
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

/// Decoupled-weight-decay Adam with global-norm clipping. Parameters and
/// moments are snapped to f32 after every step so that checkpoints restore
/// the training state bit-exactly.
inline StepStats adamw_step(Parameters& params, const ParamSelection& sel, GradBuffer& grads, AdamState& state,
                            double lr, double weight_decay, double max_grad_norm) {
    double sq = 0.0;
    for (int id : sel.tensor_ids) {
        for (double g : grads.g[static_cast<size_t>(id)]) {
            sq += g * g;
        }
    }
    const double norm = std::sqrt(sq);
    const double scale = norm > max_grad_norm ? max_grad_norm / norm : 1.0;

    state.step += 1;
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
    for (int id : sel.tensor_ids) {
        auto& w = params.tensors[static_cast<size_t>(id)].w;
        auto& gm = grads.g[static_cast<size_t>(id)];
        auto& ms = state.m[static_cast<size_t>(id)];
        auto& vs = state.v[static_cast<size_t>(id)];
        for (size_t j = 0; j < w.size(); ++j) {
            double g = gm[j] * scale;
            double mj = kAdamBeta1 * ms[j] + (1.0 - kAdamBeta1) * g;
            double vj = kAdamBeta2 * vs[j] + (1.0 - kAdamBeta2) * g * g;
            double update = (mj / bc1) / (std::sqrt(vj / bc2) + kAdamEps);
            double p = w[j] - lr * update;
            p -= lr * weight_decay * p;
            w[j] = f32_snap(p);
            ms[j] = f32_snap(mj);
            vs[j] = f32_snap(vj);
        }
    }
    StepStats stats;
    stats.step = state.step;
    stats.lr = lr;
    stats.grad_norm = norm;
    stats.clipped_norm = norm * scale;
    return stats;
}

inline double warmup_lr(double base_lr, int64_t step, int64_t warmup_steps) {
    if (warmup_steps > 0 && step < warmup_steps) {
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    }
    return base_lr;
}

struct TrainOptions {
    int n_threads = 0;
    TrainCurve* curve = nullptr;
    std::function<void(int epoch, double loss)> on_epoch;
};

namespace detail {

inline void run_batches(Parameters& params, const ParamSelection& sel, AdamState& state,
                        const std::vector<TrainingItem>& items, const std::vector<size_t>& order,
                        const HyperParams& hyper, int64_t warmup_steps, bool blocks_frozen,
                        const TrainOptions& opts, double* epoch_loss) {
    GradBuffer grads;
    std::vector<char> need(params.tensors.size(), 0);
    for (int id : sel.tensor_ids) {
        need[static_cast<size_t>(id)] = 1;
    }
    double total = 0.0;
    size_t i = 0;
    int micro = 0;
    std::vector<TrainingItem> batch;
    grads.init(params, need);
    while (i < order.size()) {
        batch.clear();
        std::string batch_ids;
        for (int b = 0; b < hyper.batch_size && i < order.size(); ++b, ++i) {
            batch.push_back(items[order[i]]);
            batch_ids += (b ? "," : "") + std::to_string(order[i]);
        }
        double loss = batch_loss_and_grad(params, batch, grads, blocks_frozen, opts.n_threads);
        if (!std::isfinite(loss)) {
            throw std::runtime_error("training aborted: non-finite loss at optimizer step " +
                                     std::to_string(state.step + 1) + " (batch example ids " + batch_ids + ")");
        }
        total += loss;
        if (++micro >= hyper.grad_accum || i >= order.size()) {
            double lr = warmup_lr(hyper.learning_rate, state.step, warmup_steps);
            StepStats stats = adamw_step(params, sel, grads, state, lr, hyper.weight_decay, hyper.max_grad_norm);
            stats.loss = loss;
            if (opts.curve) {
                opts.curve->steps.push_back(stats);
            }
            grads.init(params, need);
            micro = 0;
        }
    }
    if (epoch_loss) {
        *epoch_loss = total;
    }
}

}  // namespace detail

/// Deterministic optimization of the unlearning objective (or the
/// gradient-ascent baseline) over rendered examples. Only the parameters
/// chosen by `mode` are updated.
inline Parameters train(Parameters params, const std::vector<UnlearnExample>& train_set, const Vocab& vocab,
                        const HyperParams& hyper, TuningMode mode, Objective objective, TrainOptions opts = {}) {
    hyper.validate();
    if (train_set.empty()) {
        throw std::invalid_argument("train: empty training set");
    }
    ParamSelection sel = trainable_selection(params, mode, Rng(hyper.seed).fork("lora").next_u64());
    const bool blocks_frozen = mode.kind == TuningKind::LastLayer;

    std::vector<TrainingItem> items;
    items.reserve(train_set.size());
    for (const auto& ex : train_set) {
        items.push_back(render_training_item(vocab, ex, objective));
        if (item_has_unk(items.back())) {
            throw std::invalid_argument("train: tokenizer does not cover example '" + ex.query + "'");
        }
    }

    AdamState state;
    state.init(params, sel);
    const int64_t batches_per_epoch = static_cast<int64_t>((items.size() + hyper.batch_size - 1) / hyper.batch_size);
    const int64_t total_steps =
        hyper.epochs * ((batches_per_epoch + hyper.grad_accum - 1) / hyper.grad_accum);
    const int64_t warmup_steps = static_cast<int64_t>(hyper.warmup_ratio * static_cast<double>(total_steps));

    Rng shuffle_rng = Rng(hyper.seed).fork("epochs");
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        std::vector<size_t> order(items.size());
        std::iota(order.begin(), order.end(), size_t{0});
        Rng epoch_rng = shuffle_rng.fork(static_cast<uint64_t>(epoch));
        epoch_rng.shuffle(order);
        double epoch_loss = 0.0;
        detail::run_batches(params, sel, state, items, order, hyper, warmup_steps, blocks_frozen, opts, &epoch_loss);
        if (opts.on_epoch) {
            opts.on_epoch(epoch, epoch_loss);
        }
    }
    return params;
}

struct PretrainConfig {
    int batch_size = 8;
    double learning_rate = 1e-3;
    double weight_decay = 0.001;
    double max_grad_norm = 1.0;
    int warmup_steps = 100;
    int max_epochs = 120;
    int check_every = 2;
    double gate_accuracy = 0.95;
    int pack_min_tokens = 20;
    int pack_max_tokens = 176;
    uint64_t seed = 7;
};

struct PretrainResult {
    int epochs_run = 0;
    double gate_qa_accuracy = 0.0;
};

/// Plain next-token training on raw QA text (no unlearning spans). Each
/// epoch re-packs the shuffled QA blocks into sequences of seeded target
/// lengths so that deep positions and multi-block contexts are trained.
/// Stops once greedy QA accuracy on the gate set reaches `gate_accuracy`.
inline Parameters pretrain_lm(Parameters params, const std::vector<QAPair>& qas, const Vocab& vocab,
                              const PretrainConfig& cfg, const std::vector<QAPair>& gate_set,
                              TrainOptions opts = {}, PretrainResult* result = nullptr) {
    if (qas.empty()) {
        throw std::invalid_argument("pretrain_lm: empty QA set");
    }
    TuningMode mode = TuningMode::full();
    ParamSelection sel = trainable_selection(params, mode);
    AdamState state;
    state.init(params, sel);

    std::vector<std::vector<int>> blocks;
    blocks.reserve(qas.size());
    for (const auto& qa : qas) {
        blocks.push_back(encode(vocab, "<s> [INST] " + qa.question + " [/INST] " + qa.answer + " </s>"));
    }

    HyperParams hyper;
    hyper.epochs = 1;
    hyper.batch_size = cfg.batch_size;
    hyper.grad_accum = 1;
    hyper.learning_rate = cfg.learning_rate;
    hyper.weight_decay = cfg.weight_decay;
    hyper.max_grad_norm = cfg.max_grad_norm;
    hyper.warmup_ratio = 0.0;
    hyper.seed = cfg.seed;

    Rng root = Rng(cfg.seed).fork("pretrain");
    PretrainResult res;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        Rng rng = root.fork(static_cast<uint64_t>(epoch));
        std::vector<size_t> order(blocks.size());
        std::iota(order.begin(), order.end(), size_t{0});
        rng.shuffle(order);

        std::vector<TrainingItem> items;
        size_t i = 0;
        while (i < order.size()) {
            int budget = cfg.pack_min_tokens +
                         static_cast<int>(rng.below(static_cast<uint64_t>(cfg.pack_max_tokens - cfg.pack_min_tokens + 1)));
            TrainingItem item;
            while (i < order.size()) {
                const auto& blk = blocks[order[i]];
                if (!item.tokens.empty() &&
                    static_cast<int>(item.tokens.size() + blk.size()) > std::min(budget, vocab.max_seq_len)) {
                    break;
                }
                item.tokens.insert(item.tokens.end(), blk.begin(), blk.end());
                ++i;
            }
            for (int t = 0; t + 1 < static_cast<int>(item.tokens.size()); ++t) {
                item.target_pos.push_back(t);
                item.target_tok.push_back(item.tokens[static_cast<size_t>(t) + 1]);
            }
            items.push_back(std::move(item));
        }

        std::vector<size_t> item_order(items.size());
        std::iota(item_order.begin(), item_order.end(), size_t{0});
        double epoch_loss = 0.0;
        detail::run_batches(params, sel, state, items, item_order, hyper, cfg.warmup_steps, false, opts, &epoch_loss);
        res.epochs_run = epoch + 1;
        if (opts.on_epoch) {
            opts.on_epoch(epoch, epoch_loss);
        }

        if ((epoch + 1) % cfg.check_every == 0 || epoch + 1 == cfg.max_epochs) {
            res.gate_qa_accuracy = plain_qa_accuracy(params, vocab, gate_set, opts.n_threads);
            if (res.gate_qa_accuracy >= cfg.gate_accuracy) {
                break;
            }
        }
    }
    if (result) {
        *result = res;
    }
    return params;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "ULF1", one line of UTF-8 JSON (config, hyper, tensor
// table with byte offsets), then raw little-endian f32 tensor data in table
// order. Optimizer moments ride along as "opt.m.<name>" / "opt.v.<name>".

struct Checkpoint {
    ModelConfig config;
    std::optional<LoraSpec> lora;
    HyperParams hyper;
    uint64_t vocab_hash = 0;
    int64_t step = 0;
    Parameters params;
    AdamState opt;
};

namespace detail {

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},   {"d_model", c.d_model},         {"n_heads", c.n_heads},
            {"d_ff", c.d_ff},           {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
            {"ln_epsilon", c.ln_epsilon}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.ln_epsilon = j.at("ln_epsilon").get<double>();
    return c;
}

inline nlohmann::json hyper_to_json(const HyperParams& h) {
    return {{"epochs", h.epochs},
            {"batch_size", h.batch_size},
            {"grad_accum", h.grad_accum},
            {"learning_rate", h.learning_rate},
            {"weight_decay", h.weight_decay},
            {"max_grad_norm", h.max_grad_norm},
            {"warmup_ratio", h.warmup_ratio},
            {"schedule", h.schedule},
            {"seed", h.seed}};
}

inline HyperParams hyper_from_json(const nlohmann::json& j) {
    HyperParams h;
    h.epochs = j.at("epochs").get<int>();
    h.batch_size = j.at("batch_size").get<int>();
    h.grad_accum = j.at("grad_accum").get<int>();
    h.learning_rate = j.at("learning_rate").get<double>();
    h.weight_decay = j.at("weight_decay").get<double>();
    h.max_grad_norm = j.at("max_grad_norm").get<double>();
    h.warmup_ratio = j.at("warmup_ratio").get<double>();
    h.schedule = j.at("schedule").get<std::string>();
    h.seed = j.at("seed").get<uint64_t>();
    return h;
}

inline void append_f32(std::string& blob, const std::vector<double>& values) {
    size_t at = blob.size();
    blob.resize(at + values.size() * 4);
    for (double d : values) {
        float f = static_cast<float>(d);
        std::memcpy(blob.data() + at, &f, 4);
        at += 4;
    }
}

inline uint64_t base_weights_hash(const Parameters& p) {
    std::string blob;
    for (const auto& t : p.tensors) {
        if (t.name.find(".lora_") == std::string::npos) {
            append_f32(blob, t.w);
        }
    }
    return fnv1a64(blob.data(), blob.size());
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    nlohmann::json header;
    header["version"] = 1;
    header["config"] = detail::config_to_json(ckpt.config);
    header["hyper"] = detail::hyper_to_json(ckpt.hyper);
    header["vocab_hash"] = to_hex(ckpt.vocab_hash);
    header["step"] = ckpt.step;
    if (ckpt.lora) {
        header["lora"] = {{"rank", ckpt.lora->rank}, {"alpha", ckpt.lora->alpha}};
        header["base_hash"] = to_hex(detail::base_weights_hash(ckpt.params));
    } else {
        header["lora"] = nullptr;
    }

    std::string blob;
    nlohmann::json table = nlohmann::json::array();
    auto emit = [&](const std::string& name, int rows, int cols, const std::vector<double>& values) {
        table.push_back({{"name", name}, {"rows", rows}, {"cols", cols}, {"offset", blob.size()}});
        detail::append_f32(blob, values);
    };
    for (const auto& t : ckpt.params.tensors) {
        emit(t.name, t.rows, t.cols, t.w);
    }
    for (size_t i = 0; i < ckpt.opt.m.size(); ++i) {
        if (!ckpt.opt.m[i].empty()) {
            const auto& t = ckpt.params.tensors[i];
            emit("opt.m." + t.name, t.rows, t.cols, ckpt.opt.m[i]);
            emit("opt.v." + t.name, t.rows, t.cols, ckpt.opt.v[i]);
        }
    }
    header["tensors"] = table;

    std::string out = "ULF1";
    out += header.dump();
    out += '\n';
    out += blob;
    write_text_file(path, out);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::string raw = read_text_file(path);
    if (raw.size() < 5 || raw.compare(0, 4, "ULF1") != 0) {
        throw std::runtime_error("checkpoint format error: bad magic in " + path);
    }
    size_t nl = raw.find('\n', 4);
    if (nl == std::string::npos) {
        throw std::runtime_error("checkpoint format error: unterminated header in " + path);
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(raw.substr(4, nl - 4));
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("checkpoint format error: bad header in " + path + ": " + e.what());
    }
    if (header.at("version").get<int>() != 1) {
        throw std::runtime_error("checkpoint format error: unsupported version in " + path);
    }

    Checkpoint ckpt;
    ckpt.config = detail::config_from_json(header.at("config"));
    ckpt.config.validate();
    ckpt.hyper = detail::hyper_from_json(header.at("hyper"));
    ckpt.vocab_hash = std::stoull(header.at("vocab_hash").get<std::string>(), nullptr, 16);
    ckpt.step = header.at("step").get<int64_t>();
    if (!header.at("lora").is_null()) {
        ckpt.lora = LoraSpec{header.at("lora").at("rank").get<int>(), header.at("lora").at("alpha").get<double>()};
    }

    ckpt.params = init_model(ckpt.config, 0);
    if (ckpt.lora) {
        attach_lora(ckpt.params, ckpt.lora->rank, ckpt.lora->alpha, 0);
    }
    ckpt.opt.m.assign(ckpt.params.tensors.size(), {});
    ckpt.opt.v.assign(ckpt.params.tensors.size(), {});
    ckpt.opt.step = ckpt.step;

    const char* data = raw.data() + nl + 1;
    const size_t data_size = raw.size() - nl - 1;
    std::vector<char> seen(ckpt.params.tensors.size(), 0);
    for (const auto& entry : header.at("tensors")) {
        std::string name = entry.at("name").get<std::string>();
        int rows = entry.at("rows").get<int>();
        int cols = entry.at("cols").get<int>();
        size_t offset = entry.at("offset").get<size_t>();
        size_t count = static_cast<size_t>(rows) * static_cast<size_t>(cols);
        if (offset + count * 4 > data_size) {
            throw std::runtime_error("checkpoint format error: truncated tensor data for '" + name + "' in " + path);
        }
        std::vector<double>* dst = nullptr;
        std::string base = name;
        if (name.rfind("opt.m.", 0) == 0) {
            base = name.substr(6);
            dst = &ckpt.opt.m[static_cast<size_t>(ckpt.params.idx(base))];
        } else if (name.rfind("opt.v.", 0) == 0) {
            base = name.substr(6);
            dst = &ckpt.opt.v[static_cast<size_t>(ckpt.params.idx(base))];
        } else {
            if (!ckpt.params.has(name)) {
                throw std::runtime_error("checkpoint format error: unknown tensor '" + name + "' in " + path);
            }
            Tensor& t = ckpt.params.at(name);
            if (t.rows != rows || t.cols != cols) {
                throw std::runtime_error("checkpoint format error: shape mismatch for '" + name + "' in " + path);
            }
            seen[static_cast<size_t>(ckpt.params.idx(name))] = 1;
            dst = &t.w;
        }
        dst->resize(count);
        for (size_t j = 0; j < count; ++j) {
            float f;
            std::memcpy(&f, data + offset + j * 4, 4);
            (*dst)[j] = static_cast<double>(f);
        }
    }
    for (size_t i = 0; i < seen.size(); ++i) {
        if (!seen[i]) {
            throw std::runtime_error("checkpoint format error: missing tensor '" + ckpt.params.tensors[i].name +
                                     "' in " + path);
        }
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// Gradient verification against central finite differences.

struct GradcheckReport {
    double max_rel_err = 0.0;
    std::string worst_tensor;
    size_t worst_index = 0;
};

/// Compares the analytic gradient of the batch objective with central
/// differences for every trainable parameter. Relative error per entry is
/// |ga - gn| / max(|ga| + |gn|, 1e-6). `corrupt` is a test hook that mutates
/// the analytic gradients before comparison.
inline GradcheckReport gradcheck(Parameters& params, const std::vector<UnlearnExample>& batch, const Vocab& vocab,
                                 double epsilon, TuningMode mode, Objective objective = Objective::Ours,
                                 const std::function<void(GradBuffer&)>& corrupt = nullptr) {
    ParamSelection sel = trainable_selection(params, mode);
    GradcheckReport report;
    if (sel.tensor_ids.empty()) {
        return report;
    }
    std::vector<TrainingItem> items;
    for (const auto& ex : batch) {
        items.push_back(render_training_item(vocab, ex, objective));
    }
    GradBuffer grads;
    std::vector<char> need(params.tensors.size(), 0);
    for (int id : sel.tensor_ids) {
        need[static_cast<size_t>(id)] = 1;
    }
    grads.init(params, need);
    batch_loss_and_grad(params, items, grads, mode.kind == TuningKind::LastLayer, 1);
    if (corrupt) {
        corrupt(grads);
    }

    for (int id : sel.tensor_ids) {
        Tensor& t = params.tensors[static_cast<size_t>(id)];
        for (size_t j = 0; j < t.w.size(); ++j) {
            const double orig = t.w[j];
            const double plus = f32_snap(orig + epsilon);
            const double minus = f32_snap(orig - epsilon);
            t.w[j] = plus;
            double lp = batch_loss(params, items, 1);
            t.w[j] = minus;
            double lm = batch_loss(params, items, 1);
            t.w[j] = orig;
            double fd = (lp - lm) / (plus - minus);
            double ga = grads.g[static_cast<size_t>(id)][j];
            double rel = std::fabs(ga - fd) / std::max(std::fabs(ga) + std::fabs(fd), 1e-6);
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_tensor = t.name;
                report.worst_index = j;
            }
        }
    }
    return report;
}

}  // namespace unlearn
