#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "unlearn/model.hpp"
#include "unlearn/tokenizer.hpp"

namespace unlearn {

/// softmax(LN(h) W_u^T) with the model's final layer norm.
inline std::vector<double> logit_lens(std::span<const double> h, const Tensor& gamma, const Tensor& beta, double eps,
                                      const Tensor& w_u) {
    const int d = static_cast<int>(h.size());
    if (d != gamma.rows || d != w_u.cols) {
        throw std::invalid_argument("logit_lens: dimension mismatch");
    }
    for (double x : h) {
        if (!std::isfinite(x)) {
            throw std::runtime_error("logit_lens: numeric error, non-finite hidden state");
        }
    }
    std::vector<double> ln(static_cast<size_t>(d)), xhat(static_cast<size_t>(d));
    double rstd = 0.0;
    nn::layer_norm_row(h.data(), gamma.data(), beta.data(), eps, d, ln.data(), xhat.data(), &rstd);
    std::vector<double> probs(static_cast<size_t>(w_u.rows));
    nn::matmul_xwt(ln.data(), w_u.data(), probs.data(), 1, d, w_u.rows);
    nn::softmax_in_place(probs.data(), w_u.rows);
    return probs;
}

/// Per-layer lens distributions at the tracked positions (the last `window`
/// input tokens).
struct LensTrace {
    int n_layers = 0;
    int vocab = 0;
    std::vector<int> positions;
    std::vector<double> dist;  // [layer][tracked position][vocab]

    const double* row(int layer, int tracked) const {
        return dist.data() +
               (static_cast<size_t>(layer) * positions.size() + static_cast<size_t>(tracked)) * vocab;
    }

    int tracked_index(int position) const {
        for (size_t i = 0; i < positions.size(); ++i) {
            if (positions[i] == position) {
                return static_cast<int>(i);
            }
        }
        throw std::invalid_argument("LensTrace: position " + std::to_string(position) + " is not tracked");
    }
};

inline LensTrace lens_grid(const Parameters& params, std::span<const int> tokens, int window = 5) {
    if (window < 1) {
        throw std::invalid_argument("lens_grid: window must be >= 1");
    }
    auto out = forward_at(params, tokens, {}, nullptr, true);
    const int T = out.hidden.seq_len;
    const int d = params.config.d_model;
    LensTrace trace;
    trace.n_layers = params.config.n_layers;
    trace.vocab = params.config.vocab_size;
    for (int p = std::max(0, T - window); p < T; ++p) {
        trace.positions.push_back(p);
    }
    const Tensor& gamma = params.at("ln_f.g");
    const Tensor& beta = params.at("ln_f.b");
    const Tensor& wu = params.at("w_u");
    trace.dist.resize(static_cast<size_t>(trace.n_layers) * trace.positions.size() *
                      static_cast<size_t>(trace.vocab));
    for (int l = 0; l < trace.n_layers; ++l) {
        for (size_t pi = 0; pi < trace.positions.size(); ++pi) {
            std::span<const double> h(out.hidden.layers[static_cast<size_t>(l)].data() +
                                          static_cast<size_t>(trace.positions[pi]) * d,
                                      static_cast<size_t>(d));
            auto probs = logit_lens(h, gamma, beta, params.config.ln_epsilon, wu);
            std::copy(probs.begin(), probs.end(),
                      trace.dist.begin() +
                          (static_cast<size_t>(l) * trace.positions.size() + pi) * static_cast<size_t>(trace.vocab));
        }
    }
    return trace;
}

struct InternalAnswerScoreResult {
    int raw = 0;
    double normalized = 0.0;
    int answer_token = 0;
    int position = 0;
};

/// Number of layers whose lens argmax at `position` equals the answer token;
/// argmax ties break toward the lowest token id.
inline InternalAnswerScoreResult internal_answer_score(const LensTrace& trace, int answer_token, int position) {
    InternalAnswerScoreResult res;
    res.answer_token = answer_token;
    res.position = position;
    const int pi = trace.tracked_index(position);
    for (int l = 0; l < trace.n_layers; ++l) {
        const double* row = trace.row(l, pi);
        int best = 0;
        for (int v = 1; v < trace.vocab; ++v) {
            if (row[v] > row[best]) {
                best = v;
            }
        }
        if (best == answer_token) {
            ++res.raw;
        }
    }
    res.normalized = trace.n_layers ? static_cast<double>(res.raw) / trace.n_layers : 0.0;
    return res;
}

/// Layer x window matrix of a token's lens probability, averaged over
/// prompts. Prompts shorter than the window contribute only to the columns
/// they reach (right-aligned).
struct TraceMatrix {
    int n_layers = 0;
    int window = 0;
    std::vector<double> mean;  // layer-major
    std::vector<int> count;    // per column

    double at(int layer, int col) const { return mean[static_cast<size_t>(layer) * window + col]; }
};

inline TraceMatrix token_prob_trace(const Parameters& params, const std::vector<std::vector<int>>& prompts,
                                    const std::vector<int>& token_per_prompt, int window) {
    if (prompts.empty()) {
        throw std::invalid_argument("token_prob_trace: no prompts");
    }
    if (window < 1) {
        throw std::invalid_argument("token_prob_trace: window must be >= 1");
    }
    if (token_per_prompt.size() != prompts.size()) {
        throw std::invalid_argument("token_prob_trace: one token per prompt required");
    }
    TraceMatrix m;
    m.n_layers = params.config.n_layers;
    m.window = window;
    m.mean.assign(static_cast<size_t>(m.n_layers) * window, 0.0);
    m.count.assign(static_cast<size_t>(window), 0);
    for (size_t i = 0; i < prompts.size(); ++i) {
        LensTrace trace = lens_grid(params, prompts[i], window);
        const int used = static_cast<int>(trace.positions.size());
        for (int c = 0; c < used; ++c) {
            int col = window - used + c;
            for (int l = 0; l < m.n_layers; ++l) {
                m.mean[static_cast<size_t>(l) * window + col] += trace.row(l, c)[token_per_prompt[i]];
            }
        }
        for (int c = window - used; c < window; ++c) {
            ++m.count[static_cast<size_t>(c)];
        }
    }
    for (int col = 0; col < window; ++col) {
        if (m.count[static_cast<size_t>(col)] > 0) {
            for (int l = 0; l < m.n_layers; ++l) {
                m.mean[static_cast<size_t>(l) * window + col] /= m.count[static_cast<size_t>(col)];
            }
        }
    }
    return m;
}

inline TraceMatrix token_prob_trace(const Parameters& params, const std::vector<std::vector<int>>& prompts, int token,
                                    int window) {
    return token_prob_trace(params, prompts, std::vector<int>(prompts.size(), token), window);
}

// ---------------------------------------------------------------------------
// CSV / SVG heatmap export. CSV: header row of position labels, one row per
// layer. SVG: one rect per cell, fixed white-to-blue ramp over [0, 1].

inline std::string matrix_to_csv(const std::vector<std::vector<double>>& rows,
                                 const std::vector<std::string>& col_labels,
                                 const std::vector<std::string>& row_labels) {
    std::string out = "layer";
    for (const auto& c : col_labels) {
        out += "," + c;
    }
    out += "\n";
    char buf[64];
    for (size_t r = 0; r < rows.size(); ++r) {
        out += row_labels[r];
        for (double v : rows[r]) {
            std::snprintf(buf, sizeof(buf), ",%.10g", v);
            out += buf;
        }
        out += "\n";
    }
    return out;
}

inline std::vector<std::vector<double>> parse_matrix_csv(const std::string& csv) {
    std::vector<std::vector<double>> rows;
    size_t line_start = 0;
    bool header = true;
    while (line_start < csv.size()) {
        size_t line_end = csv.find('\n', line_start);
        if (line_end == std::string::npos) {
            line_end = csv.size();
        }
        std::string line = csv.substr(line_start, line_end - line_start);
        line_start = line_end + 1;
        if (line.empty()) {
            continue;
        }
        if (header) {
            header = false;
            continue;
        }
        std::vector<double> vals;
        size_t cell = line.find(',');
        while (cell != std::string::npos) {
            size_t next = line.find(',', cell + 1);
            std::string tok = line.substr(cell + 1, (next == std::string::npos ? line.size() : next) - cell - 1);
            vals.push_back(std::stod(tok));
            cell = next;
        }
        rows.push_back(std::move(vals));
    }
    return rows;
}

namespace detail {

inline std::string ramp_color(double v) {
    v = std::clamp(v, 0.0, 1.0);
    // white -> deep blue
    int r = static_cast<int>(std::lround(255.0 - v * (255.0 - 24.0)));
    int g = static_cast<int>(std::lround(255.0 - v * (255.0 - 80.0)));
    int b = static_cast<int>(std::lround(255.0 - v * (255.0 - 160.0)));
    char buf[16];
    std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace detail

inline std::string matrix_to_svg(const std::vector<std::vector<double>>& rows,
                                 const std::vector<std::string>& col_labels,
                                 const std::vector<std::string>& row_labels,
                                 const std::vector<std::vector<std::string>>* annotations = nullptr) {
    const int cell = 56, margin_left = 70, margin_top = 30, margin_bottom = 46;
    const int n_rows = static_cast<int>(rows.size());
    const int n_cols = n_rows ? static_cast<int>(rows[0].size()) : 0;
    const int width = margin_left + n_cols * cell + 10;
    const int height = margin_top + n_rows * cell + margin_bottom;
    std::string svg;
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" font-family=\"monospace\" "
                  "font-size=\"11\">\n",
                  width, height);
    svg += buf;
    for (int r = 0; r < n_rows; ++r) {
        for (int c = 0; c < n_cols; ++c) {
            double v = rows[static_cast<size_t>(r)][static_cast<size_t>(c)];
            std::snprintf(buf, sizeof(buf),
                          "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"%s\" stroke=\"#999\"/>\n",
                          margin_left + c * cell, margin_top + r * cell, cell, cell,
                          detail::ramp_color(v).c_str());
            svg += buf;
            std::string label;
            if (annotations) {
                label = (*annotations)[static_cast<size_t>(r)][static_cast<size_t>(c)];
            } else {
                std::snprintf(buf, sizeof(buf), "%.2f", v);
                label = buf;
            }
            std::snprintf(buf, sizeof(buf),
                          "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\" fill=\"%s\">%s</text>\n",
                          margin_left + c * cell + cell / 2, margin_top + r * cell + cell / 2 + 4,
                          v > 0.55 ? "#ffffff" : "#222222", detail::xml_escape(label).c_str());
            svg += buf;
        }
        std::snprintf(buf, sizeof(buf), "<text x=\"%d\" y=\"%d\" text-anchor=\"end\">%s</text>\n", margin_left - 6,
                      margin_top + r * cell + cell / 2 + 4,
                      detail::xml_escape(row_labels[static_cast<size_t>(r)]).c_str());
        svg += buf;
    }
    for (int c = 0; c < n_cols; ++c) {
        std::snprintf(buf, sizeof(buf), "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">%s</text>\n",
                      margin_left + c * cell + cell / 2, margin_top + n_rows * cell + 16,
                      detail::xml_escape(col_labels[static_cast<size_t>(c)]).c_str());
        svg += buf;
    }
    std::snprintf(buf, sizeof(buf), "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">token position</text>\n",
                  margin_left + n_cols * cell / 2, margin_top + n_rows * cell + 36);
    svg += buf;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"12\" y=\"%d\" transform=\"rotate(-90 12 %d)\" text-anchor=\"middle\">layer</text>\n",
                  margin_top + n_rows * cell / 2, margin_top + n_rows * cell / 2);
    svg += buf;
    svg += "</svg>\n";
    return svg;
}

/// CSV plus SVG heatmap of a trace matrix.
inline void export_heatmap(const TraceMatrix& m, const std::vector<std::string>& col_labels,
                           const std::string& base_path) {
    std::vector<std::vector<double>> rows(static_cast<size_t>(m.n_layers));
    std::vector<std::string> row_labels;
    for (int l = 0; l < m.n_layers; ++l) {
        rows[static_cast<size_t>(l)].assign(m.mean.begin() + static_cast<size_t>(l) * m.window,
                                            m.mean.begin() + static_cast<size_t>(l + 1) * m.window);
        row_labels.push_back(std::to_string(l + 1));
    }
    write_text_file(base_path + ".csv", matrix_to_csv(rows, col_labels, row_labels));
    write_text_file(base_path + ".svg", matrix_to_svg(rows, col_labels, row_labels));
}

/// CSV + SVG + JSON sidecar for a lens grid; heat = argmax probability, cell
/// annotation = argmax token string.
inline void export_lens_grid(const LensTrace& trace, const Vocab& vocab, const std::vector<int>& prompt_tokens,
                             const std::string& base_path) {
    const int n_pos = static_cast<int>(trace.positions.size());
    std::vector<std::vector<double>> rows(static_cast<size_t>(trace.n_layers),
                                          std::vector<double>(static_cast<size_t>(n_pos)));
    std::vector<std::vector<std::string>> annot(static_cast<size_t>(trace.n_layers),
                                                std::vector<std::string>(static_cast<size_t>(n_pos)));
    nlohmann::json sidecar = nlohmann::json::array();
    for (int l = 0; l < trace.n_layers; ++l) {
        nlohmann::json layer_row = nlohmann::json::array();
        for (int c = 0; c < n_pos; ++c) {
            const double* dist = trace.row(l, c);
            int best = 0;
            for (int v = 1; v < trace.vocab; ++v) {
                if (dist[v] > dist[best]) {
                    best = v;
                }
            }
            rows[static_cast<size_t>(l)][static_cast<size_t>(c)] = dist[best];
            annot[static_cast<size_t>(l)][static_cast<size_t>(c)] = vocab.tokens[static_cast<size_t>(best)];
            layer_row.push_back({{"layer", l + 1},
                                 {"position", trace.positions[static_cast<size_t>(c)]},
                                 {"argmax_token", vocab.tokens[static_cast<size_t>(best)]},
                                 {"prob", dist[best]}});
        }
        sidecar.push_back(layer_row);
    }
    std::vector<std::string> col_labels, row_labels;
    for (int p : trace.positions) {
        col_labels.push_back(vocab.tokens[static_cast<size_t>(prompt_tokens[static_cast<size_t>(p)])] + "@" +
                             std::to_string(p));
    }
    for (int l = 0; l < trace.n_layers; ++l) {
        row_labels.push_back(std::to_string(l + 1));
    }
    write_text_file(base_path + ".csv", matrix_to_csv(rows, col_labels, row_labels));
    write_text_file(base_path + ".svg", matrix_to_svg(rows, col_labels, row_labels, &annot));
    write_text_file(base_path + "_argmax.json", sidecar.dump(2) + "\n");
}

}  // namespace unlearn
