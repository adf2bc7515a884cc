// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#include "moend/solver.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "moend/errors.hpp"

namespace moend::solver {

namespace {

constexpr int kPlanFormatVersion = 1;

void check_dims(const CacheDims& dims) {
    if (dims.num_layers == 0 || dims.num_kv_heads == 0 || dims.head_dim == 0 || dims.t_cache == 0) {
        throw ConfigError("cache dimensions must be positive");
    }
}

[[noreturn]] void throw_infeasible(double needed, double budget, const std::string& what) {
    const double deficit = std::ceil(needed - budget);
    throw InfeasibleError(what + " needs " + std::to_string(static_cast<std::uint64_t>(std::ceil(needed))) +
                              " bytes, budget is " + std::to_string(static_cast<std::uint64_t>(budget)) +
                              " (deficit " + std::to_string(static_cast<std::uint64_t>(deficit)) + " bytes)",
                          deficit);
}

// Largest keep whose (keep, k, v) fits M on every layer.
LayerCompressionConfig largest_uniform_keep(const calib::ConfigSpace& space, int k_bits, int v_bits,
                                            const MemoryBudget& budget, const CacheDims& dims) {
    double cheapest = std::numeric_limits<double>::infinity();
    for (auto it = KeepRatio::kLegalPercent.rbegin(); it != KeepRatio::kLegalPercent.rend(); ++it) {
        const LayerCompressionConfig c{KeepRatio::from_percent(*it), BitWidth(k_bits), BitWidth(v_bits)};
        if (!space.index_of(c)) continue;
        const double per_layer = memory_cost(c, dims);
        double total = 0.0;
        for (std::size_t l = 0; l < dims.num_layers; ++l) total += per_layer;
        cheapest = std::min(cheapest, total);
        if (total <= static_cast<double>(budget.bytes)) return c;
    }
    if (!std::isfinite(cheapest)) {
        throw ConfigError("config space '" + space.name + "' has no (keep, k" + std::to_string(k_bits) + ", v" +
                          std::to_string(v_bits) + ") columns");
    }
    throw_infeasible(cheapest, static_cast<double>(budget.bytes), "smallest uniform keep");
}

std::vector<std::vector<Candidate>> candidates_for(const calib::SensitivityTable& table,
                                                   const std::vector<std::size_t>& columns, const CacheDims& dims) {
    std::vector<std::vector<Candidate>> layers(table.num_layers);
    for (std::size_t l = 0; l < table.num_layers; ++l) {
        for (std::size_t c : columns) {
            layers[l].push_back({c, memory_cost(table.space.configs[c], dims), table.at(l, c)});
        }
    }
    return layers;
}

RoutingPlan make_plan(const calib::SensitivityTable& table, const Selection& sel, Policy policy,
                      const MemoryBudget& budget, const CacheDims& dims, std::string solver) {
    RoutingPlan plan;
    plan.policy = policy;
    plan.budget = budget;
    plan.dims = dims;
    plan.solver = std::move(solver);
    plan.model_spec_hash = table.model_spec_hash;
    for (std::size_t l = 0; l < sel.ids.size(); ++l) {
        const auto& cfg = table.space.configs[sel.ids[l]];
        plan.layers.push_back({l, cfg, memory_cost(cfg, dims), table.at(l, sel.ids[l])});
    }
    plan.total_memory = sel.total_memory;
    plan.total_sensitivity = sel.total_sensitivity;
    return plan;
}

Selection fixed_selection(const calib::SensitivityTable& table, std::size_t column, const CacheDims& dims) {
    Selection sel;
    sel.ids.assign(table.num_layers, column);
    const double m = memory_cost(table.space.configs[column], dims);
    for (std::size_t l = 0; l < table.num_layers; ++l) {
        sel.total_memory += m;
        sel.total_sensitivity += table.at(l, column);
    }
    return sel;
}

RoutingPlan solve_with_limit(const calib::SensitivityTable& table, const MemoryBudget& budget, Policy policy,
                             const CacheDims& dims, SolverKind kind, std::size_t max_layers) {
    if (table.num_layers != dims.num_layers) {
        throw ConfigError("sensitivity table has " + std::to_string(table.num_layers) + " layers, cache has " +
                          std::to_string(dims.num_layers));
    }
    const auto columns = apply_policy(table.space, policy, budget, dims);
    const double m = static_cast<double>(budget.bytes);
    if (columns.size() == 1) {
        const Selection sel = fixed_selection(table, columns.front(), dims);
        if (policy != Policy::kFull && sel.total_memory > m) {
            throw_infeasible(sel.total_memory, m, std::string(policy_name(policy)) + " plan");
        }
        return make_plan(table, sel, policy, budget, dims, "rule");
    }
    const auto layers = candidates_for(table, columns, dims);
    if (kind == SolverKind::kOracle) {
        return make_plan(table, oracle_select(layers, m, max_layers), policy, budget, dims, "oracle");
    }
    return make_plan(table, greedy_select(layers, m), policy, budget, dims, "greedy");
}

}  // namespace

CacheDims CacheDims::full_scale(std::size_t t_cache) { return {28, 8, 128, t_cache}; }

CacheDims CacheDims::from_spec(const ModelSpec& spec, std::size_t t_cache) {
    return {spec.num_layers, spec.num_kv_heads, spec.head_dim, t_cache};
}

double memory_cost(const LayerCompressionConfig& config, std::size_t t_cache, std::size_t num_kv_heads,
                   std::size_t head_dim) {
    const double elements = static_cast<double>(t_cache) * static_cast<double>(num_kv_heads) *
                            static_cast<double>(head_dim);
    return config.keep.value() * elements * static_cast<double>(config.k_bits.bits() + config.v_bits.bits()) / 8.0;
}

double memory_cost(const LayerCompressionConfig& config, const CacheDims& dims) {
    return memory_cost(config, dims.t_cache, dims.num_kv_heads, dims.head_dim);
}

Policy parse_policy(std::string_view name) {
    if (name == "full") return Policy::kFull;
    if (name == "1d") return Policy::k1d;
    if (name == "2d_uniform") return Policy::k2dUniform;
    if (name == "2d") return Policy::k2d;
    if (name == "2d_hetero") return Policy::k2dHetero;
    throw ConfigError("unknown policy '" + std::string(name) + "' (expected full, 1d, 2d_uniform, 2d or 2d_hetero)");
}

std::string_view policy_name(Policy policy) {
    switch (policy) {
        case Policy::kFull: return "full";
        case Policy::k1d: return "1d";
        case Policy::k2dUniform: return "2d_uniform";
        case Policy::k2d: return "2d";
        case Policy::k2dHetero: return "2d_hetero";
    }
    return "full";
}

double budget_scale(Policy policy) {
    return policy == Policy::k2d || policy == Policy::k2dHetero ? 4.0 / 1.5 : 1.0;
}

MemoryBudget budget_from_tokens(std::uint64_t tokens, Policy policy, const CacheDims& dims) {
    if (tokens == 0) throw ConfigError("token budget must be >= 1");
    check_dims(dims);
    const std::uint64_t base = static_cast<std::uint64_t>(dims.num_layers) * tokens * dims.num_kv_heads *
                               dims.head_dim * 4u;
    MemoryBudget b;
    b.tokens = tokens;
    b.scale = budget_scale(policy);
    b.bytes = b.scale == 1.0 ? base : base * 8u / 3u;
    return b;
}

MemoryBudget budget_from_bytes(std::uint64_t bytes) {
    if (bytes == 0) throw ConfigError("memory budget must be positive");
    MemoryBudget b;
    b.bytes = bytes;
    return b;
}

std::vector<Candidate> pareto_prune(std::span<const Candidate> row) {
    if (row.empty()) throw InputError("pareto_prune needs at least one candidate");
    std::vector<Candidate> sorted(row.begin(), row.end());
    std::sort(sorted.begin(), sorted.end(), [](const Candidate& a, const Candidate& b) {
        if (a.memory != b.memory) return a.memory < b.memory;
        if (a.sensitivity != b.sensitivity) return a.sensitivity < b.sensitivity;
        return a.id < b.id;
    });
    std::vector<Candidate> frontier;
    for (const auto& c : sorted) {
        if (frontier.empty() || c.sensitivity < frontier.back().sensitivity) {
            if (!frontier.empty() && frontier.back().memory == c.memory) continue;
            frontier.push_back(c);
        }
    }
    return frontier;
}

double total_memory(const std::vector<std::vector<Candidate>>& layers, std::span<const std::size_t> ids) {
    double total = 0.0;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto it = std::find_if(layers[l].begin(), layers[l].end(),
                                     [&](const Candidate& c) { return c.id == ids[l]; });
        if (it == layers[l].end()) throw InputError("candidate id not present in layer " + std::to_string(l));
        total += it->memory;
    }
    return total;
}

Selection greedy_select(const std::vector<std::vector<Candidate>>& layers, double budget) {
    if (layers.empty()) throw InputError("greedy_select needs at least one layer");
    std::vector<std::vector<Candidate>> frontiers;
    frontiers.reserve(layers.size());
    for (const auto& row : layers) frontiers.push_back(pareto_prune(row));

    const std::size_t n = frontiers.size();
    std::vector<std::size_t> pos(n, 0);
    auto memory_with = [&](std::size_t layer, std::size_t point) {
        double total = 0.0;
        for (std::size_t l = 0; l < n; ++l) total += frontiers[l][l == layer ? point : pos[l]].memory;
        return total;
    };
    const double start = memory_with(n, 0);
    if (start > budget) throw_infeasible(start, budget, "cheapest configuration on every layer");

    for (;;) {
        std::size_t best_layer = n;
        double best_ratio = -std::numeric_limits<double>::infinity();
        for (std::size_t l = 0; l < n; ++l) {
            if (pos[l] + 1 >= frontiers[l].size()) continue;
            const Candidate& cur = frontiers[l][pos[l]];
            const Candidate& next = frontiers[l][pos[l] + 1];
            if (memory_with(l, pos[l] + 1) > budget) continue;
            const double ratio = (cur.sensitivity - next.sensitivity) / (next.memory - cur.memory);
            if (ratio > best_ratio) {
                best_ratio = ratio;
                best_layer = l;
            }
        }
        if (best_layer == n) break;
        ++pos[best_layer];
    }

    Selection sel;
    for (std::size_t l = 0; l < n; ++l) {
        const Candidate& c = frontiers[l][pos[l]];
        sel.ids.push_back(c.id);
        sel.total_memory += c.memory;
        sel.total_sensitivity += c.sensitivity;
    }
    return sel;
}

Selection oracle_select(const std::vector<std::vector<Candidate>>& layers, double budget, std::size_t max_layers,
                        double max_points) {
    if (layers.empty()) throw InputError("oracle_select needs at least one layer");
    if (layers.size() > max_layers) {
        throw SizeError("exhaustive search limited to " + std::to_string(max_layers) + " layers, got " +
                        std::to_string(layers.size()));
    }
    double points = 1.0;
    std::vector<std::vector<Candidate>> rows;
    for (const auto& row : layers) {
        if (row.empty()) throw InputError("oracle_select: layer with no candidates");
        points *= static_cast<double>(row.size());
        std::vector<Candidate> sorted = row;
        std::sort(sorted.begin(), sorted.end(), [](const Candidate& a, const Candidate& b) { return a.id < b.id; });
        rows.push_back(std::move(sorted));
    }
    if (points > max_points) throw SizeError("exhaustive search space too large");

    const std::size_t n = rows.size();
    std::vector<std::size_t> idx(n, 0);
    std::optional<Selection> best;
    double cheapest = std::numeric_limits<double>::infinity();
    for (;;) {
        double mem = 0.0;
        double sens = 0.0;
        for (std::size_t l = 0; l < n; ++l) {
            mem += rows[l][idx[l]].memory;
            sens += rows[l][idx[l]].sensitivity;
        }
        cheapest = std::min(cheapest, mem);
        if (mem <= budget && (!best || sens < best->total_sensitivity)) {
            Selection s;
            for (std::size_t l = 0; l < n; ++l) s.ids.push_back(rows[l][idx[l]].id);
            s.total_memory = mem;
            s.total_sensitivity = sens;
            best = std::move(s);
        }
        std::size_t l = n;
        while (l > 0) {
            --l;
            if (++idx[l] < rows[l].size()) break;
            idx[l] = 0;
            if (l == 0) {
                l = n + 1;
                break;
            }
        }
        if (l == n + 1) break;
    }
    if (!best) throw_infeasible(cheapest, budget, "cheapest assignment");
    return *best;
}

std::vector<LayerCompressionConfig> RoutingPlan::configs() const {
    std::vector<LayerCompressionConfig> out;
    for (const auto& l : layers) out.push_back(l.config);
    return out;
}

std::vector<std::size_t> apply_policy(const calib::ConfigSpace& space, Policy policy, const MemoryBudget& budget,
                                      const CacheDims& dims) {
    check_dims(dims);
    switch (policy) {
        case Policy::kFull:
            return {space.identity_index()};
        case Policy::k1d:
            return {*space.index_of(largest_uniform_keep(space, 16, 16, budget, dims))};
        case Policy::k2dUniform:
            return {*space.index_of(largest_uniform_keep(space, 8, 4, budget, dims))};
        case Policy::k2d: {
            const KeepRatio keep = largest_uniform_keep(space, 8, 4, budget, dims).keep;
            std::vector<std::size_t> cols;
            for (std::size_t c = 0; c < space.size(); ++c) {
                if (space.configs[c].keep == keep) cols.push_back(c);
            }
            return cols;
        }
        case Policy::k2dHetero: {
            std::vector<std::size_t> cols(space.size());
            for (std::size_t c = 0; c < cols.size(); ++c) cols[c] = c;
            return cols;
        }
    }
    throw ConfigError("unknown policy");
}

RoutingPlan solve(const calib::SensitivityTable& table, const MemoryBudget& budget, Policy policy,
                  const CacheDims& dims, SolverKind kind) {
    return solve_with_limit(table, budget, policy, dims, kind, 4);
}

RoutingPlan solve_greedy(const calib::SensitivityTable& table, const MemoryBudget& budget, Policy policy,
                         const CacheDims& dims) {
    return solve_with_limit(table, budget, policy, dims, SolverKind::kGreedy, 0);
}

RoutingPlan solve_oracle(const calib::SensitivityTable& table, const MemoryBudget& budget, Policy policy,
                         const CacheDims& dims, std::size_t max_layers) {
    return solve_with_limit(table, budget, policy, dims, SolverKind::kOracle, max_layers);
}

RoutingPlan uniform_plan(const LayerCompressionConfig& config, const CacheDims& dims, Policy policy,
                         const MemoryBudget& budget, const calib::SensitivityTable* table) {
    check_dims(dims);
    RoutingPlan plan;
    plan.policy = policy;
    plan.budget = budget;
    plan.dims = dims;
    plan.solver = "rule";
    const std::optional<std::size_t> column = table ? table->space.index_of(config) : std::nullopt;
    if (table) plan.model_spec_hash = table->model_spec_hash;
    const double m = memory_cost(config, dims);
    for (std::size_t l = 0; l < dims.num_layers; ++l) {
        const double s = column ? table->at(l, *column) : 0.0;
        plan.layers.push_back({l, config, m, s});
        plan.total_memory += m;
        plan.total_sensitivity += s;
    }
    return plan;
}

AblationDeltas ablation_deltas(const std::map<Policy, double>& metric_by_policy) {
    auto get = [&](Policy p) {
        const auto it = metric_by_policy.find(p);
        if (it == metric_by_policy.end()) {
            throw InputError("ablation needs a result for policy " + std::string(policy_name(p)));
        }
        return it->second;
    };
    const double uniform = get(Policy::k2dUniform);
    const double routed = get(Policy::k2d);
    const double hetero = get(Policy::k2dHetero);
    return {routed - uniform, hetero - routed};
}

nlohmann::json to_json(const RoutingPlan& plan) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : plan.layers) {
        layers.push_back({{"layer", l.layer},
                          {"keep", l.config.keep.value()},
                          {"k_bits", l.config.k_bits.bits()},
                          {"v_bits", l.config.v_bits.bits()},
                          {"config_id", l.config.id()},
                          {"m_bytes", l.m_bytes},
                          {"s_pred", l.s_pred}});
    }
    nlohmann::json budget = {{"b", plan.budget.tokens ? nlohmann::json(*plan.budget.tokens) : nlohmann::json()},
                             {"scale", plan.budget.scale},
                             {"M_bytes", plan.budget.bytes}};
    return {{"format_version", kPlanFormatVersion},
            {"policy", policy_name(plan.policy)},
            {"solver", plan.solver},
            {"model_spec_hash", plan.model_spec_hash},
            {"budget", std::move(budget)},
            {"dims",
             {{"num_layers", plan.dims.num_layers},
              {"num_kv_heads", plan.dims.num_kv_heads},
              {"head_dim", plan.dims.head_dim},
              {"t_cache", plan.dims.t_cache}}},
            {"layers", std::move(layers)},
            {"totals", {{"memory_bytes", plan.total_memory}, {"sensitivity", plan.total_sensitivity}}}};
}

RoutingPlan plan_from_json(const nlohmann::json& j) {
    RoutingPlan plan;
    try {
        if (j.at("format_version").get<int>() != kPlanFormatVersion) {
            throw FormatError("unsupported routing plan format_version");
        }
        plan.policy = parse_policy(j.at("policy").get<std::string>());
        plan.solver = j.value("solver", std::string("rule"));
        plan.model_spec_hash = j.value("model_spec_hash", std::string());
        const auto& b = j.at("budget");
        if (!b.at("b").is_null()) plan.budget.tokens = b.at("b").get<std::uint64_t>();
        plan.budget.scale = b.at("scale").get<double>();
        plan.budget.bytes = b.at("M_bytes").get<std::uint64_t>();
        const auto& d = j.at("dims");
        plan.dims = {d.at("num_layers").get<std::size_t>(), d.at("num_kv_heads").get<std::size_t>(),
                     d.at("head_dim").get<std::size_t>(), d.at("t_cache").get<std::size_t>()};
        for (const auto& l : j.at("layers")) {
            LayerAssignment a;
            a.layer = l.at("layer").get<std::size_t>();
            a.config = LayerCompressionConfig::make(l.at("keep").get<double>(), l.at("k_bits").get<int>(),
                                                    l.at("v_bits").get<int>());
            a.m_bytes = l.at("m_bytes").get<double>();
            a.s_pred = l.at("s_pred").get<double>();
            if (a.layer != plan.layers.size()) throw FormatError("routing plan layers out of order");
            plan.layers.push_back(a);
        }
        plan.total_memory = j.at("totals").at("memory_bytes").get<double>();
        plan.total_sensitivity = j.at("totals").at("sensitivity").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed routing plan: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("malformed routing plan: ") + e.what());
    }
    if (plan.layers.size() != plan.dims.num_layers) throw FormatError("routing plan layer count mismatch");
    return plan;
}

void save_plan(const std::filesystem::path& path, const RoutingPlan& plan) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json(plan).dump(2) << '\n';
    if (!out) throw IoError("failed writing " + path.string());
}

RoutingPlan load_plan(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed routing plan " + path.string() + ": " + e.what());
    }
    return plan_from_json(j);
}

}  // namespace moend::solver
