#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "unlearn/common.hpp"

namespace unlearn {

enum class Domain { A, B };

inline char domain_tag(Domain d) { return d == Domain::A ? 'A' : 'B'; }

inline Domain domain_from_tag(const std::string& s) {
    if (s == "A") return Domain::A;
    if (s == "B") return Domain::B;
    throw std::runtime_error("invalid domain tag: " + s);
}

/// A closed synthetic world: every (entity, attribute) pair carries exactly
/// one single-word value, and all values are distinct so the string inside an
/// unlearning span identifies its fact unambiguously.
struct FactWorld {
    std::string world_id;
    Domain domain = Domain::A;
    std::vector<std::string> entities;
    std::vector<std::string> attributes;
    std::vector<std::string> values;  // entity-major: values[e * n_attributes + a]

    const std::string& fact(size_t e, size_t a) const { return values[e * attributes.size() + a]; }
    size_t fact_count() const { return values.size(); }
};

struct QAPair {
    std::string question;
    std::string answer;
    std::string knowledge_key;
    Domain domain = Domain::A;
};

enum class Kind { Forget, Retain };

/// Training/eval triple. `unlearn_target` is the span content u, `query` is q,
/// `target_output` is the supervised completion (the forget marker or the
/// answer). The key/gold fields identify the underlying facts for splitting,
/// baseline construction and scoring.
struct UnlearnExample {
    std::string unlearn_target;
    std::string query;
    std::string target_output;
    Kind kind = Kind::Forget;
    std::string query_key;
    std::string u_key;
    std::string gold_answer;
    Domain domain = Domain::A;
};

inline constexpr const char* kForgetMarker = "forgot";

namespace detail {

struct NameBanks {
    std::vector<std::string> entity_first, entity_second;
    std::vector<std::string> value_first, value_mid, value_last;
    std::vector<std::string> attribute_names;
    std::vector<std::string> value_suffixes;  // one per attribute
};

inline const NameBanks& banks(Domain d) {
    static const NameBanks a = {
        {"Bal", "Dor", "Fen", "Gar", "Hul", "Jor", "Kel", "Lam", "Mir", "Nor", "Pas", "Quil", "Ras", "Tam", "Vor",
         "Wes", "Yor", "Zan"},
        {"ben", "dal", "fir", "gon", "hark", "jun", "kol", "lim", "mos", "nir", "pol", "quat", "rin", "sel", "tor",
         "ull", "vek", "wim", "yat", "zur"},
        {"Vel", "Mar", "Bex", "Cal", "Dun", "Fal", "Gor", "Hel", "Jas", "Kir", "Lum", "Ner", "Oss", "Pry", "Rov",
         "Sil", "Tur", "Wyn"},
        {"a", "e", "i", "o", "u", "ar", "en", "il", "or", "un"},
        {"", "an", "eth", "os"},
        {"city", "color", "animal", "drink", "instrument", "relic", "motto", "trade", "patron", "emblem", "garden",
         "vessel"},
        {"burg", "hue", "paw", "brew", "chord", "lith", "cant", "ware", "kin", "crest", "bloom", "hull"},
    };
    static const NameBanks b = {
        {"Axo", "Bru", "Cre", "Dwi", "Eku", "Flo", "Gry", "Hyl", "Ixa", "Jel", "Kru", "Lyx"},
        {"max", "nog", "ost", "pua", "rez", "sug", "tyx", "umb", "vex", "wub"},
        {"Zyl", "Quor", "Xan", "Ubr", "Ylg", "Vre", "Oxa", "Ilk", "Ekt", "Arn"},
        {"y", "yx", "ua", "ou", "ei"},
        {"", "ek", "um"},
        {"mountain", "metal", "fruit", "river", "gem", "cloud", "spice", "tide"},
        {"spire", "ingot", "pome", "run", "shard", "puff", "zest", "swell"},
    };
    return d == Domain::A ? a : b;
}

inline std::vector<size_t> shuffled_indices(size_t n, Rng& rng) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    rng.shuffle(idx);
    return idx;
}

}  // namespace detail

/// Deterministic function of (seed, sizes, domain): equal seeds give
/// bit-identical worlds.
inline FactWorld generate_fact_world(uint64_t seed, int n_entities, int n_attributes, Domain domain) {
    if (n_entities < 1 || n_attributes < 1) {
        throw std::invalid_argument("generate_fact_world: entity and attribute counts must be >= 1");
    }
    const auto& bk = detail::banks(domain);
    const size_t entity_capacity = bk.entity_first.size() * bk.entity_second.size();
    const size_t value_capacity = bk.value_first.size() * bk.value_mid.size() * bk.value_last.size();
    if (static_cast<size_t>(n_entities) > entity_capacity || static_cast<size_t>(n_entities) > value_capacity) {
        throw std::invalid_argument("generate_fact_world: entity count exceeds name bank capacity");
    }
    if (static_cast<size_t>(n_attributes) > bk.attribute_names.size()) {
        throw std::invalid_argument("generate_fact_world: attribute count exceeds schema capacity");
    }

    FactWorld w;
    w.domain = domain;
    w.world_id = std::string("world-") + domain_tag(domain) + "-" + std::to_string(seed) + "-" +
                 std::to_string(n_entities) + "x" + std::to_string(n_attributes);

    Rng rng = Rng(seed).fork("factworld").fork(static_cast<uint64_t>(domain));

    Rng ent_rng = rng.fork("entities");
    auto ent_idx = detail::shuffled_indices(entity_capacity, ent_rng);
    for (int e = 0; e < n_entities; ++e) {
        size_t k = ent_idx[static_cast<size_t>(e)];
        w.entities.push_back(bk.entity_first[k % bk.entity_first.size()] +
                             bk.entity_second[k / bk.entity_first.size()]);
    }
    w.attributes.assign(bk.attribute_names.begin(), bk.attribute_names.begin() + n_attributes);

    w.values.resize(static_cast<size_t>(n_entities) * static_cast<size_t>(n_attributes));
    for (int a = 0; a < n_attributes; ++a) {
        Rng val_rng = rng.fork("values").fork(static_cast<uint64_t>(a));
        auto val_idx = detail::shuffled_indices(value_capacity, val_rng);
        const std::string& suffix = bk.value_suffixes[static_cast<size_t>(a)];
        for (int e = 0; e < n_entities; ++e) {
            size_t k = val_idx[static_cast<size_t>(e)];
            size_t f = k % bk.value_first.size();
            size_t m = (k / bk.value_first.size()) % bk.value_mid.size();
            size_t l = k / (bk.value_first.size() * bk.value_mid.size());
            w.values[static_cast<size_t>(e) * static_cast<size_t>(n_attributes) + static_cast<size_t>(a)] =
                bk.value_first[f] + bk.value_mid[m] + bk.value_last[l] + suffix;
        }
    }
    return w;
}

/// Fixed one-slot question templates, keyed by attribute name.
inline std::map<std::string, std::string> default_templates(Domain domain) {
    if (domain == Domain::A) {
        return {
            {"city", "Which city does {entity} call home?"},
            {"color", "Which color does {entity} always wear?"},
            {"animal", "Which animal does {entity} keep around?"},
            {"drink", "Which drink does {entity} enjoy daily?"},
            {"instrument", "Which instrument does {entity} play nightly?"},
            {"relic", "Which relic does {entity} guard closely?"},
            {"motto", "Which motto does {entity} repeat often?"},
            {"trade", "Which trade does {entity} practice proudly?"},
            {"patron", "Which patron does {entity} serve loyally?"},
            {"emblem", "Which emblem does {entity} display openly?"},
            {"garden", "Which garden does {entity} tend carefully?"},
            {"vessel", "Which vessel does {entity} sail gladly?"},
        };
    }
    return {
        {"mountain", "Which mountain does {entity} climb yearly?"},
        {"metal", "Which metal does {entity} forge best?"},
        {"fruit", "Which fruit does {entity} harvest early?"},
        {"river", "Which river does {entity} cross often?"},
        {"gem", "Which gem does {entity} prize most?"},
        {"cloud", "Which cloud does {entity} watch longest?"},
        {"spice", "Which spice does {entity} favor most?"},
        {"tide", "Which tide does {entity} study closely?"},
    };
}

inline std::string knowledge_key(Domain domain, const std::string& entity, const std::string& attribute) {
    return std::string(1, domain_tag(domain)) + ":" + entity + ":" + attribute;
}

/// One QAPair per (entity, attribute), entity-major order.
inline std::vector<QAPair> derive_qa_pairs(const FactWorld& world, const std::map<std::string, std::string>& templates) {
    for (const auto& attr : world.attributes) {
        if (!templates.count(attr)) {
            throw std::runtime_error("derive_qa_pairs: configuration error, no template for attribute '" + attr + "'");
        }
    }
    std::vector<QAPair> out;
    out.reserve(world.fact_count());
    for (size_t e = 0; e < world.entities.size(); ++e) {
        for (size_t a = 0; a < world.attributes.size(); ++a) {
            const std::string& tpl = templates.at(world.attributes[a]);
            std::string q = tpl;
            size_t pos = q.find("{entity}");
            if (pos == std::string::npos) {
                throw std::runtime_error("derive_qa_pairs: template for '" + world.attributes[a] +
                                         "' lacks {entity} slot");
            }
            q.replace(pos, 8, world.entities[e]);
            out.push_back({q, world.fact(e, a), knowledge_key(world.domain, world.entities[e], world.attributes[a]),
                           world.domain});
        }
    }
    return out;
}

/// For each QAPair: one Forget example (u = the pair's own answer value) and
/// `retain_per_forget` Retain examples whose u comes from a different pair.
/// Retain u's are sampled inside deterministic key buckets so that
/// split_dataset can later separate train and test without u-references
/// crossing the partition.
inline std::vector<UnlearnExample> build_examples(const std::vector<QAPair>& qas, uint64_t seed,
                                                  int retain_per_forget) {
    if (qas.empty()) {
        throw std::invalid_argument("build_examples: empty QA list");
    }
    if (retain_per_forget < 1) {
        throw std::invalid_argument("build_examples: retain_per_forget must be >= 1");
    }

    struct KeyInfo {
        std::string answer;
        size_t bucket = 0;
    };
    std::vector<std::string> key_order;
    std::unordered_map<std::string, KeyInfo> keys;
    for (const auto& qa : qas) {
        if (keys.emplace(qa.knowledge_key, KeyInfo{qa.answer, 0}).second) {
            key_order.push_back(qa.knowledge_key);
        }
    }
    const size_t n_keys = key_order.size();
    if (n_keys < 2) {
        throw std::runtime_error("build_examples: construction error, need >= 2 knowledge keys for retain examples");
    }

    Rng rng = Rng(seed).fork("examples");
    constexpr size_t kBucketTarget = 10;
    const size_t n_buckets = std::max<size_t>(1, n_keys / kBucketTarget);

    Rng bucket_rng = rng.fork("buckets");
    auto order = detail::shuffled_indices(n_keys, bucket_rng);
    std::vector<std::vector<size_t>> buckets(n_buckets);
    const size_t base = n_keys / n_buckets, rem = n_keys % n_buckets;
    size_t cursor = 0;
    for (size_t b = 0; b < n_buckets; ++b) {
        size_t sz = base + (b < rem ? 1 : 0);
        for (size_t i = 0; i < sz; ++i) {
            size_t key_idx = order[cursor++];
            buckets[b].push_back(key_idx);
            keys[key_order[key_idx]].bucket = b;
        }
    }

    Rng sample_rng = rng.fork("retain-u");
    std::vector<UnlearnExample> out;
    out.reserve(qas.size() * static_cast<size_t>(1 + retain_per_forget));
    for (const auto& qa : qas) {
        out.push_back({qa.answer, qa.question, kForgetMarker, Kind::Forget, qa.knowledge_key, qa.knowledge_key,
                       qa.answer, qa.domain});
        const auto& info = keys.at(qa.knowledge_key);
        const auto& bucket = buckets[info.bucket];
        for (int r = 0; r < retain_per_forget; ++r) {
            std::optional<size_t> pick;
            for (int attempt = 0; attempt < 64 && !pick; ++attempt) {
                size_t cand = bucket[sample_rng.below(bucket.size())];
                const auto& ck = key_order[cand];
                if (ck != qa.knowledge_key && keys.at(ck).answer != qa.answer) {
                    pick = cand;
                }
            }
            if (!pick) {
                // Deterministic scan, bucket first then global.
                auto scan = [&](const std::vector<size_t>& pool) -> std::optional<size_t> {
                    for (size_t cand : pool) {
                        const auto& ck = key_order[cand];
                        if (ck != qa.knowledge_key && keys.at(ck).answer != qa.answer) {
                            return cand;
                        }
                    }
                    return std::nullopt;
                };
                pick = scan(bucket);
                if (!pick) {
                    auto all = detail::shuffled_indices(n_keys, sample_rng);
                    pick = scan(all);
                }
            }
            if (!pick) {
                throw std::runtime_error("build_examples: construction error, no eligible retain unlearn target for " +
                                         qa.knowledge_key);
            }
            const auto& ck = key_order[*pick];
            out.push_back({keys.at(ck).answer, qa.question, qa.answer, Kind::Retain, qa.knowledge_key, ck, qa.answer,
                           qa.domain});
        }
    }
    return out;
}

namespace detail {

struct DisjointSet {
    std::vector<size_t> parent;
    explicit DisjointSet(size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), size_t{0}); }
    size_t find(size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    }
    void unite(size_t a, size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) {
            parent[std::max(a, b)] = std::min(a, b);
        }
    }
};

}  // namespace detail

/// Disjoint, exhaustive partition of `examples`, grouped by the query's
/// knowledge_key. The primary strategy splits along connected components of
/// the (query_key, u_key) reference graph, so that no unlearn-target string
/// seen in training spans can occur on the test side and vice versa. When the
/// components are too coarse to approximate the ratio (tiny corpora), the
/// split falls back to plain query-key grouping.
inline std::pair<std::vector<UnlearnExample>, std::vector<UnlearnExample>> split_dataset(
    const std::vector<UnlearnExample>& examples, double ratio, uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) {
        throw std::invalid_argument("split_dataset: ratio must be in (0, 1)");
    }
    if (examples.empty()) {
        throw std::runtime_error("split_dataset: split error, no examples");
    }

    std::vector<std::string> node_order;                 // all keys, query or u
    std::unordered_map<std::string, size_t> node_index;  // key -> node id
    auto node_of = [&](const std::string& key) {
        auto it = node_index.find(key);
        if (it != node_index.end()) {
            return it->second;
        }
        size_t id = node_order.size();
        node_index.emplace(key, id);
        node_order.push_back(key);
        return id;
    };

    std::vector<std::string> group_order;  // query keys in appearance order
    std::unordered_map<std::string, size_t> group_index;
    for (const auto& ex : examples) {
        if (group_index.emplace(ex.query_key, group_order.size()).second) {
            group_order.push_back(ex.query_key);
        }
        node_of(ex.query_key);
        node_of(ex.u_key);
    }
    const size_t n_groups = group_order.size();
    const long long target_test = static_cast<long long>(n_groups) - std::llround(ratio * static_cast<double>(n_groups));
    if (n_groups < 2 || target_test < 1 || target_test >= static_cast<long long>(n_groups)) {
        throw std::runtime_error("split_dataset: split error, too few knowledge_key groups to honor ratio " +
                                 std::to_string(ratio));
    }

    detail::DisjointSet ds(node_order.size());
    for (const auto& ex : examples) {
        ds.unite(node_index.at(ex.query_key), node_index.at(ex.u_key));
    }

    // Components listed with the number of query-key groups they contain.
    std::unordered_map<size_t, size_t> root_to_comp;
    std::vector<std::vector<size_t>> comp_groups;
    for (size_t g = 0; g < n_groups; ++g) {
        size_t root = ds.find(node_index.at(group_order[g]));
        auto it = root_to_comp.find(root);
        if (it == root_to_comp.end()) {
            it = root_to_comp.emplace(root, comp_groups.size()).first;
            comp_groups.emplace_back();
        }
        comp_groups[it->second].push_back(g);
    }

    Rng rng = Rng(seed).fork("split");
    auto comp_order = detail::shuffled_indices(comp_groups.size(), rng);

    // Subset-sum over component sizes: find a union of components whose group
    // count is within 1 of the target, preferring an exact hit.
    const size_t m = comp_order.size();
    std::vector<std::vector<char>> reach(m + 1, std::vector<char>(n_groups + 1, 0));
    reach[0][0] = 1;
    for (size_t i = 0; i < m; ++i) {
        size_t sz = comp_groups[comp_order[i]].size();
        for (size_t s = 0; s <= n_groups; ++s) {
            reach[i + 1][s] = reach[i][s] || (s >= sz && reach[i][s - sz]);
        }
    }
    std::optional<size_t> chosen_sum;
    for (long long dev : {0LL, -1LL, 1LL}) {
        long long s = target_test + dev;
        if (s >= 1 && s < static_cast<long long>(n_groups) && reach[m][static_cast<size_t>(s)]) {
            chosen_sum = static_cast<size_t>(s);
            break;
        }
    }

    std::vector<char> group_in_test(n_groups, 0);
    if (chosen_sum) {
        size_t s = *chosen_sum;
        for (size_t i = m; i-- > 0;) {
            size_t sz = comp_groups[comp_order[i]].size();
            if (s >= sz && reach[i][s - sz]) {
                for (size_t g : comp_groups[comp_order[i]]) {
                    group_in_test[g] = 1;
                }
                s -= sz;
            }
        }
    } else {
        // Fallback: plain query-key grouping; leak guarantees not achievable
        // at this granularity.
        auto groups = detail::shuffled_indices(n_groups, rng);
        for (long long i = 0; i < target_test; ++i) {
            group_in_test[groups[static_cast<size_t>(i)]] = 1;
        }
    }

    std::vector<UnlearnExample> train, test;
    for (const auto& ex : examples) {
        (group_in_test[group_index.at(ex.query_key)] ? test : train).push_back(ex);
    }
    return {std::move(train), std::move(test)};
}

/// Violation counts for the split guarantees, checkable by set arithmetic.
struct SplitLeakReport {
    size_t test_query_keys_in_train_targets = 0;
    size_t test_u_strings_in_train_spans = 0;
};

inline SplitLeakReport split_leak_report(const std::vector<UnlearnExample>& train,
                                         const std::vector<UnlearnExample>& test) {
    std::unordered_set<std::string> train_u_keys, train_u_strings;
    for (const auto& ex : train) {
        train_u_keys.insert(ex.u_key);
        train_u_strings.insert(ex.unlearn_target);
    }
    SplitLeakReport rep;
    for (const auto& ex : test) {
        if (train_u_keys.count(ex.query_key)) {
            ++rep.test_query_keys_in_train_targets;
        }
        if (train_u_strings.count(ex.unlearn_target)) {
            ++rep.test_u_strings_in_train_spans;
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// JSON persistence.
// QA dataset files are a UTF-8 JSON array of
//   {"question": str, "answer": str, "knowledge_key": str, "domain": "A"|"B"}
// with unknown fields rejected.

inline nlohmann::json qa_to_json(const std::vector<QAPair>& qas) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& qa : qas) {
        arr.push_back({{"question", qa.question},
                       {"answer", qa.answer},
                       {"knowledge_key", qa.knowledge_key},
                       {"domain", std::string(1, domain_tag(qa.domain))}});
    }
    return arr;
}

inline void save_qa_json(const std::vector<QAPair>& qas, const std::string& path) {
    write_text_file(path, qa_to_json(qas).dump(2) + "\n");
}

inline std::vector<QAPair> parse_qa_json(const nlohmann::json& arr) {
    if (!arr.is_array()) {
        throw std::runtime_error("qa dataset: parse error, top-level value must be an array");
    }
    static const std::array<const char*, 4> fields = {"question", "answer", "knowledge_key", "domain"};
    std::vector<QAPair> out;
    out.reserve(arr.size());
    for (size_t i = 0; i < arr.size(); ++i) {
        const auto& rec = arr[i];
        const std::string at = " at record " + std::to_string(i);
        if (!rec.is_object()) {
            throw std::runtime_error("qa dataset: parse error" + at + ": not an object");
        }
        for (const char* f : fields) {
            if (!rec.contains(f)) {
                throw std::runtime_error("qa dataset: parse error" + at + ": missing field '" + f + "'");
            }
            if (!rec.at(f).is_string()) {
                throw std::runtime_error("qa dataset: parse error" + at + ": field '" + f + "' must be a string");
            }
        }
        for (auto it = rec.begin(); it != rec.end(); ++it) {
            if (std::find_if(fields.begin(), fields.end(), [&](const char* f) { return it.key() == f; }) ==
                fields.end()) {
                throw std::runtime_error("qa dataset: parse error" + at + ": unknown field '" + it.key() + "'");
            }
        }
        out.push_back({rec.at("question").get<std::string>(), rec.at("answer").get<std::string>(),
                       rec.at("knowledge_key").get<std::string>(),
                       domain_from_tag(rec.at("domain").get<std::string>())});
    }
    return out;
}

inline std::vector<QAPair> load_qa_json(const std::string& path) {
    nlohmann::json arr;
    try {
        arr = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("qa dataset: parse error in " + path + ": " + e.what());
    }
    return parse_qa_json(arr);
}

inline nlohmann::json examples_to_json(const std::vector<UnlearnExample>& examples) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& ex : examples) {
        arr.push_back({{"unlearn_target", ex.unlearn_target},
                       {"query", ex.query},
                       {"target_output", ex.target_output},
                       {"kind", ex.kind == Kind::Forget ? "forget" : "retain"},
                       {"query_key", ex.query_key},
                       {"u_key", ex.u_key},
                       {"gold_answer", ex.gold_answer},
                       {"domain", std::string(1, domain_tag(ex.domain))}});
    }
    return arr;
}

inline void save_examples_json(const std::vector<UnlearnExample>& examples, const std::string& path) {
    write_text_file(path, examples_to_json(examples).dump(2) + "\n");
}

inline std::vector<UnlearnExample> load_examples_json(const std::string& path) {
    nlohmann::json arr = nlohmann::json::parse(read_text_file(path));
    if (!arr.is_array()) {
        throw std::runtime_error("examples file: top-level value must be an array: " + path);
    }
    std::vector<UnlearnExample> out;
    out.reserve(arr.size());
    for (size_t i = 0; i < arr.size(); ++i) {
        const auto& rec = arr[i];
        try {
            std::string kind = rec.at("kind").get<std::string>();
            if (kind != "forget" && kind != "retain") {
                throw std::runtime_error("invalid kind '" + kind + "'");
            }
            out.push_back({rec.at("unlearn_target").get<std::string>(), rec.at("query").get<std::string>(),
                           rec.at("target_output").get<std::string>(),
                           kind == "forget" ? Kind::Forget : Kind::Retain, rec.at("query_key").get<std::string>(),
                           rec.at("u_key").get<std::string>(), rec.at("gold_answer").get<std::string>(),
                           domain_from_tag(rec.at("domain").get<std::string>())});
        } catch (const std::exception& e) {
            throw std::runtime_error("examples file: parse error at record " + std::to_string(i) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace unlearn
