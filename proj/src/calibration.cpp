// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#include "moend/calibration.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <thread>

#include <nlohmann/json.hpp>

#include "moend/errors.hpp"

namespace moend::calib {

namespace {

constexpr int kTableFormatVersion = 1;
constexpr double kIdentityTolerance = 1e-7;

std::vector<LayerCompressionConfig> single_axis_ops() {
    return {
        LayerCompressionConfig::make(0.10, 16, 16), LayerCompressionConfig::make(0.25, 16, 16),
        LayerCompressionConfig::make(0.50, 16, 16), LayerCompressionConfig::make(0.75, 16, 16),
        LayerCompressionConfig::make(0.90, 16, 16), LayerCompressionConfig::make(1.0, 8, 16),
        LayerCompressionConfig::make(1.0, 4, 16),   LayerCompressionConfig::make(1.0, 16, 8),
        LayerCompressionConfig::make(1.0, 16, 4),
    };
}

// Runs fn(layer, config) for every cell, writing into a preallocated slot per
// cell so the result does not depend on scheduling.
template <typename Fn>
std::vector<double> evaluate_cells(std::size_t layers, std::size_t configs, std::size_t threads, Fn&& fn) {
    const std::size_t cells = layers * configs;
    std::vector<double> out(cells, 0.0);
    if (threads == 0) {
        threads = std::max(1u, std::thread::hardware_concurrency());
    }
    threads = std::min(threads, std::max<std::size_t>(cells, 1));
    if (threads <= 1) {
        for (std::size_t i = 0; i < cells; ++i) out[i] = fn(i / configs, i % configs);
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells) return;
            try {
                out[i] = fn(i / configs, i % configs);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next.store(cells);
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
    return out;
}

// Which configs must actually be measured for the requested composition.
struct MeasurePlan {
    ConfigSpace measured;
    // For each target column: indices into measured (one for direct, three for additive).
    std::vector<std::vector<std::size_t>> parts;
};

MeasurePlan plan_measurements(const ConfigSpace& space, Composition composition) {
    MeasurePlan plan;
    plan.measured.name = space.name;
    auto intern = [&](const LayerCompressionConfig& c) {
        if (auto idx = plan.measured.index_of(c)) return *idx;
        plan.measured.configs.push_back(c);
        return plan.measured.configs.size() - 1;
    };
    for (const auto& c : space.configs) {
        if (composition == Composition::kDirect || c.is_identity()) {
            plan.parts.push_back({intern(c)});
            continue;
        }
        std::vector<std::size_t> parts;
        const LayerCompressionConfig evict{c.keep, BitWidth(16), BitWidth(16)};
        const LayerCompressionConfig kq{KeepRatio(1.0), c.k_bits, BitWidth(16)};
        const LayerCompressionConfig vq{KeepRatio(1.0), BitWidth(16), c.v_bits};
        for (const auto& p : {evict, kq, vq}) {
            if (!p.is_identity()) parts.push_back(intern(p));
        }
        plan.parts.push_back(std::move(parts));
    }
    return plan;
}

SensitivityTable assemble(const ModelSpec& spec, const ConfigSpace& space, const MeasurePlan& plan,
                          const std::vector<double>& measured, const CalibrationOptions& options, Metric metric) {
    SensitivityTable table;
    table.num_layers = spec.num_layers;
    table.space = space;
    table.model_spec_hash = spec.hash();
    table.prompt_id = options.prompt_id;
    table.scorer = options.scorer;
    table.metric = metric;
    table.seed = options.seed;
    table.scores.assign(spec.num_layers * space.size(), 0.0);
    const std::size_t m = plan.measured.size();
    for (std::size_t l = 0; l < spec.num_layers; ++l) {
        for (std::size_t c = 0; c < space.size(); ++c) {
            double s = 0.0;
            for (std::size_t p : plan.parts[c]) s += measured[l * m + p];
            table.at(l, c) = s;
        }
    }
    return table;
}

PerturbationOptions perturbation_options(const CalibrationOptions& options, std::size_t layer) {
    PerturbationOptions p;
    p.scorer = options.scorer;
    p.scorer_seed = layer_scorer_seed(options.seed, layer);
    p.v_group_size = options.v_group_size;
    return p;
}

std::vector<double> log_softmax(std::span<const float> logits) {
    double mx = -std::numeric_limits<double>::infinity();
    for (float x : logits) mx = std::max(mx, static_cast<double>(x));
    double sum = 0.0;
    for (float x : logits) sum += std::exp(static_cast<double>(x) - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
    return out;
}

std::vector<double> average_ranks(std::span<const double> x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

std::optional<double> mean_of(const std::vector<std::optional<double>>& xs) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& x : xs) {
        if (x) {
            sum += *x;
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

nlohmann::json optional_json(const std::optional<double>& x) { return x ? nlohmann::json(*x) : nlohmann::json(); }

}  // namespace

Metric parse_metric(std::string_view name) {
    if (name == "l2" || name == "l2_proxy") return Metric::kL2Proxy;
    if (name == "kl") return Metric::kKl;
    throw ConfigError("unknown metric '" + std::string(name) + "' (expected l2 or kl)");
}

std::string_view metric_name(Metric metric) { return metric == Metric::kKl ? "kl" : "l2_proxy"; }

ConfigSpace ConfigSpace::full() {
    ConfigSpace s;
    s.name = "full";
    for (auto it = KeepRatio::kLegalPercent.rbegin(); it != KeepRatio::kLegalPercent.rend(); ++it) {
        for (int k : BitWidth::kLegal) {
            for (int v : BitWidth::kLegal) {
                s.configs.push_back({KeepRatio::from_percent(*it), BitWidth(k), BitWidth(v)});
            }
        }
    }
    return s;
}

ConfigSpace ConfigSpace::table2() {
    ConfigSpace s;
    s.name = "table2";
    s.configs.push_back(LayerCompressionConfig::identity());
    for (const auto& c : single_axis_ops()) s.configs.push_back(c);
    return s;
}

ConfigSpace ConfigSpace::calib11() {
    ConfigSpace s = table2();
    s.name = "calib11";
    s.configs.push_back(LayerCompressionConfig::make(1.0, 8, 4));
    return s;
}

ConfigSpace ConfigSpace::by_name(std::string_view name) {
    if (name == "full") return full();
    if (name == "table2") return table2();
    if (name == "calib11") return calib11();
    throw ConfigError("unknown config space '" + std::string(name) + "' (expected full, table2 or calib11)");
}

std::optional<std::size_t> ConfigSpace::index_of(const LayerCompressionConfig& config) const {
    for (std::size_t i = 0; i < configs.size(); ++i) {
        if (configs[i] == config) return i;
    }
    return std::nullopt;
}

std::size_t ConfigSpace::identity_index() const {
    auto idx = index_of(LayerCompressionConfig::identity());
    if (!idx) throw ConfigError("config space '" + name + "' lacks the identity config");
    return *idx;
}

std::vector<NamedOp> table2_ops() {
    const auto ops = single_axis_ops();
    const char* names[] = {"evict_10",  "evict_25",  "evict_50",  "evict_75", "evict_90",
                           "k_quant_8", "k_quant_4", "v_quant_8", "v_quant_4"};
    std::vector<NamedOp> out;
    for (std::size_t i = 0; i < ops.size(); ++i) out.push_back({names[i], ops[i]});
    return out;
}

void SensitivityTable::validate() const {
    if (space.size() == 0) throw FormatError("sensitivity table has no configs");
    if (scores.size() != num_layers * space.size()) {
        throw FormatError("sensitivity table has " + std::to_string(scores.size()) + " scores, expected " +
                          std::to_string(num_layers * space.size()));
    }
    for (double s : scores) {
        if (!std::isfinite(s) || s < 0.0) throw FormatError("sensitivity scores must be finite and >= 0");
    }
    const auto id = space.index_of(LayerCompressionConfig::identity());
    if (!id) throw FormatError("sensitivity table lacks the identity config");
    for (std::size_t l = 0; l < num_layers; ++l) {
        if (at(l, *id) > kIdentityTolerance) {
            throw FormatError("identity column of layer " + std::to_string(l) + " is not zero");
        }
    }
}

std::uint64_t layer_scorer_seed(std::uint64_t seed, std::size_t layer) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(layer) + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

double relative_l2(const Tensor& reference, const Tensor& perturbed) {
    if (reference.shape != perturbed.shape || reference.rank() != 2) {
        throw ShapeError("relative_l2 expects two [T, D] tensors of equal shape");
    }
    const std::size_t rows = reference.dim(0);
    if (rows == 0) throw ShapeError("relative_l2 needs at least one position");
    double total = 0.0;
    for (std::size_t t = 0; t < rows; ++t) {
        const auto a = reference.row(t);
        const auto b = perturbed.row(t);
        double ref = 0.0;
        double diff = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double x = a[i];
            const double e = x - static_cast<double>(b[i]);
            ref += x * x;
            diff += e * e;
        }
        if (ref == 0.0) {
            if (diff != 0.0) throw CalibrationError("zero-norm reference output at position " + std::to_string(t));
            continue;
        }
        total += std::sqrt(diff) / std::sqrt(ref);
    }
    const double score = total / static_cast<double>(rows);
    if (!std::isfinite(score)) throw CalibrationError("non-finite relative L2 score");
    return score;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw ShapeError("kl_divergence expects equal-length distributions");
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
        kl += p[i] * (std::log(p[i]) - std::log(q[i]));
    }
    return std::max(kl, 0.0);
}

double kl_from_logits(std::span<const float> reference, std::span<const float> other) {
    if (reference.size() != other.size()) throw ShapeError("kl_from_logits expects equal-length logits");
    const auto lp = log_softmax(reference);
    const auto lq = log_softmax(other);
    double kl = 0.0;
    for (std::size_t i = 0; i < lp.size(); ++i) kl += std::exp(lp[i]) * (lp[i] - lq[i]);
    return std::max(kl, 0.0);
}

SensitivityTable calibrate_l2(const ToyModel& model, std::span<const TokenId> prompt, const ConfigSpace& space,
                              const CalibrationOptions& options) {
    if (prompt.size() < 2) throw InputError("calibration prompt needs at least 2 tokens");
    space.identity_index();
    const ModelSpec& spec = model.spec();
    const ForwardRecording rec = model.forward_recorded(prompt);
    const MeasurePlan plan = plan_measurements(space, options.composition);
    const auto measured =
        evaluate_cells(spec.num_layers, plan.measured.size(), options.threads, [&](std::size_t l, std::size_t c) {
            const auto acts = model.resume_with_perturbation(rec, l, plan.measured.configs[c],
                                                             perturbation_options(options, l), false);
            return relative_l2(rec.activations.attention[l], acts.attention[l]);
        });
    return assemble(spec, space, plan, measured, options, Metric::kL2Proxy);
}

SensitivityTable calibrate_kl(const ToyModel& model, const std::vector<std::vector<TokenId>>& heldout,
                              const ConfigSpace& space, const CalibrationOptions& options) {
    if (heldout.empty()) throw InputError("KL calibration needs at least one held-out sequence");
    for (const auto& s : heldout) {
        if (s.size() < 2) throw InputError("held-out sequences need at least 2 tokens");
    }
    space.identity_index();
    const ModelSpec& spec = model.spec();
    std::vector<ForwardRecording> recs;
    recs.reserve(heldout.size());
    for (const auto& s : heldout) recs.push_back(model.forward_recorded(s));
    const MeasurePlan plan = plan_measurements(space, options.composition);
    const auto measured =
        evaluate_cells(spec.num_layers, plan.measured.size(), options.threads, [&](std::size_t l, std::size_t c) {
            const auto& config = plan.measured.configs[c];
            double total = 0.0;
            std::size_t positions = 0;
            for (const auto& rec : recs) {
                const auto acts = model.resume_with_perturbation(rec, l, config, perturbation_options(options, l), true);
                const Tensor& ref = rec.activations.logits;
                for (std::size_t t = 0; t < ref.dim(0); ++t) {
                    total += kl_from_logits(ref.row(t), acts.logits.row(t));
                }
                positions += ref.dim(0);
            }
            const double score = total / static_cast<double>(positions);
            if (!std::isfinite(score)) throw CalibrationError("non-finite KL score");
            return score;
        });
    auto table = assemble(spec, space, plan, measured, options, Metric::kKl);
    table.prompt_id = "heldout-" + std::to_string(heldout.size()) + "x" + std::to_string(heldout.front().size());
    return table;
}

std::vector<std::vector<TokenId>> heldout_sequences(const ModelSpec& spec, std::size_t count, std::size_t length,
                                                    std::uint64_t seed) {
    std::vector<std::vector<TokenId>> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(random_tokens(length, spec.vocab_size, layer_scorer_seed(seed ^ 0x5EEDull, i)));
    }
    return out;
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw InputError("pearson expects equal-length inputs");
    if (x.size() < 2) return std::nullopt;
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw InputError("spearman expects equal-length inputs");
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    return pearson(rx, ry);
}

CorrelationReport correlate(const SensitivityTable& a, const SensitivityTable& b) {
    if (a.num_layers != b.num_layers || a.space.configs != b.space.configs) {
        throw InputError("correlate expects tables with identical layers and config columns");
    }
    std::vector<std::size_t> cols;
    for (std::size_t c = 0; c < a.space.size(); ++c) {
        if (!a.space.configs[c].is_identity()) cols.push_back(c);
    }
    CorrelationReport r;
    for (std::size_t l = 0; l < a.num_layers; ++l) {
        std::vector<double> x;
        std::vector<double> y;
        for (std::size_t c : cols) {
            x.push_back(a.at(l, c));
            y.push_back(b.at(l, c));
        }
        r.layer_pearson.push_back(pearson(x, y));
        r.layer_spearman.push_back(spearman(x, y));
    }
    for (std::size_t c : cols) {
        std::vector<double> x;
        std::vector<double> y;
        for (std::size_t l = 0; l < a.num_layers; ++l) {
            x.push_back(a.at(l, c));
            y.push_back(b.at(l, c));
        }
        r.config_ids.push_back(a.space.configs[c].id());
        r.config_pearson.push_back(pearson(x, y));
    }
    r.mean_layer_pearson = mean_of(r.layer_pearson);
    r.mean_layer_spearman = mean_of(r.layer_spearman);
    r.mean_config_pearson = mean_of(r.config_pearson);
    return r;
}

std::vector<OpStats> heterogeneity_stats(const SensitivityTable& table, const std::vector<NamedOp>& ops) {
    std::vector<OpStats> out;
    for (const auto& op : ops) {
        const auto col = table.space.index_of(op.config);
        if (!col) continue;
        OpStats s{op.name, op.config, std::numeric_limits<double>::infinity(), 0.0, 0.0};
        for (std::size_t l = 0; l < table.num_layers; ++l) {
            s.min = std::min(s.min, table.at(l, *col));
            s.max = std::max(s.max, table.at(l, *col));
        }
        s.ratio = s.min < 1e-12 ? std::numeric_limits<double>::infinity() : s.max / s.min;
        out.push_back(std::move(s));
    }
    return out;
}

nlohmann::json to_json(const SensitivityTable& table) {
    nlohmann::json configs = nlohmann::json::array();
    for (const auto& c : table.space.configs) {
        configs.push_back({{"id", c.id()}, {"keep", c.keep.value()}, {"k_bits", c.k_bits.bits()},
                           {"v_bits", c.v_bits.bits()}});
    }
    return {{"format_version", kTableFormatVersion},
            {"model_spec_hash", table.model_spec_hash},
            {"metric", metric_name(table.metric)},
            {"scorer", eviction::scorer_name(table.scorer)},
            {"seed", table.seed},
            {"prompt_id", table.prompt_id},
            {"space", table.space.name},
            {"num_layers", table.num_layers},
            {"configs", std::move(configs)},
            {"scores", table.scores}};
}

SensitivityTable table_from_json(const nlohmann::json& j) {
    SensitivityTable t;
    try {
        if (j.at("format_version").get<int>() != kTableFormatVersion) {
            throw FormatError("unsupported sensitivity table format_version");
        }
        t.model_spec_hash = j.at("model_spec_hash").get<std::string>();
        t.metric = parse_metric(j.at("metric").get<std::string>());
        t.scorer = eviction::parse_scorer(j.at("scorer").get<std::string>());
        t.seed = j.at("seed").get<std::uint64_t>();
        t.prompt_id = j.value("prompt_id", std::string());
        t.space.name = j.value("space", std::string("custom"));
        for (const auto& c : j.at("configs")) {
            auto cfg = LayerCompressionConfig::make(c.at("keep").get<double>(), c.at("k_bits").get<int>(),
                                                    c.at("v_bits").get<int>());
            if (c.contains("id") && c.at("id").get<std::string>() != cfg.id()) {
                throw FormatError("config id '" + c.at("id").get<std::string>() + "' does not match its fields");
            }
            t.space.configs.push_back(cfg);
        }
        for (const auto& s : j.at("scores")) {
            if (!s.is_number()) throw FormatError("sensitivity scores must be numbers");
            t.scores.push_back(s.get<double>());
        }
        if (t.space.size() == 0) throw FormatError("sensitivity table has no configs");
        t.num_layers = j.contains("num_layers") ? j.at("num_layers").get<std::size_t>()
                                                : t.scores.size() / t.space.size();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed sensitivity table: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("malformed sensitivity table: ") + e.what());
    }
    t.validate();
    return t;
}

nlohmann::json to_json(const CorrelationReport& report) {
    auto list = [](const std::vector<std::optional<double>>& xs) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& x : xs) a.push_back(optional_json(x));
        return a;
    };
    return {{"layer_pearson", list(report.layer_pearson)},
            {"layer_spearman", list(report.layer_spearman)},
            {"config_ids", report.config_ids},
            {"config_pearson", list(report.config_pearson)},
            {"mean_layer_pearson", optional_json(report.mean_layer_pearson)},
            {"mean_layer_spearman", optional_json(report.mean_layer_spearman)},
            {"mean_config_pearson", optional_json(report.mean_config_pearson)}};
}

nlohmann::json to_json(const std::vector<OpStats>& stats) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& s : stats) {
        out.push_back({{"op", s.op},
                       {"config_id", s.config.id()},
                       {"min", s.min},
                       {"max", s.max},
                       {"ratio", std::isfinite(s.ratio) ? nlohmann::json(s.ratio) : nlohmann::json("inf")}});
    }
    return out;
}

void save_table(const std::filesystem::path& path, const SensitivityTable& table) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json(table).dump(2) << '\n';
    if (!out) throw IoError("failed writing " + path.string());
}

SensitivityTable load_table(const std::filesystem::path& path, const std::optional<std::string>& expected_model_hash) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed sensitivity table " + path.string() + ": " + e.what());
    }
    SensitivityTable t = table_from_json(j);
    if (expected_model_hash && *expected_model_hash != t.model_spec_hash) {
        throw StaleCalibrationError("sensitivity table was built for model " + t.model_spec_hash + ", expected " +
                                    *expected_model_hash);
    }
    return t;
}

void write_table_csv(const std::filesystem::path& path, const SensitivityTable& table) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "layer,config_id,keep,k_bits,v_bits,score\n";
    char buf[64];
    for (std::size_t l = 0; l < table.num_layers; ++l) {
        for (std::size_t c = 0; c < table.space.size(); ++c) {
            const auto& cfg = table.space.configs[c];
            std::snprintf(buf, sizeof(buf), "%.17g", table.at(l, c));
            out << l << ',' << cfg.id() << ',' << cfg.keep.value() << ',' << cfg.k_bits.bits() << ','
                << cfg.v_bits.bits() << ',' << buf << '\n';
        }
    }
    if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace moend::calib
