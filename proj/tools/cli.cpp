// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "moend/decode_harness.hpp"
#include "moend/errors.hpp"
#include "moend/solver.hpp"

namespace moend::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num(double x, int precision = 6) {
    if (!std::isfinite(x)) return x > 0 ? "inf" : "nan";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", precision, x);
    return buf;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

ModelSpec load_model_spec(const json& j, const fs::path& base) {
    ModelSpec spec;
    try {
        if (j.is_string()) {
            fs::path p = j.get<std::string>();
            if (p.is_relative()) p = base / p;
            return load_model_spec(read_json(p), p.parent_path());
        }
        spec = j.get<ModelSpec>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid model spec: ") + e.what());
    }
    spec.validate();
    return spec;
}

fs::path table_path(const RunConfig& c, calib::Metric metric) {
    return c.out / (metric == calib::Metric::kKl ? "sensitivity_kl.json" : "sensitivity_l2.json");
}

std::string plan_stem(solver::Policy policy, std::uint64_t b) {
    return "plan_" + std::string(solver::policy_name(policy)) + "_b" + std::to_string(b);
}

std::vector<TokenId> simulation_prompt(const RunConfig& c, std::size_t length) {
    return random_tokens(length, c.model.vocab_size, c.seed * 1000003ull + length);
}

calib::CalibrationOptions calibration_options(const RunConfig& c) {
    calib::CalibrationOptions o;
    o.scorer = c.calibration_scorer;
    o.seed = c.seed;
    o.threads = c.threads;
    return o;
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    calib::ConfigSpace::by_name(space);
    for (const auto& p : policies) solver::parse_policy(p);
    if (policies.empty()) throw ConfigError("at least one policy is required");
    if (budgets.empty()) throw ConfigError("at least one budget is required");
    for (auto b : budgets) {
        if (b == 0) throw ConfigError("budgets must be positive");
    }
    if (t_cache == 0) throw ConfigError("t_cache must be positive");
    if (eviction_period == 0) throw ConfigError("eviction period must be positive");
    if (heldout_count == 0 || heldout_length < 2) throw ConfigError("held-out set needs >= 1 sequence of >= 2 tokens");
    for (auto p : prompt_lengths) {
        if (p == 0) throw ConfigError("prompt lengths must be positive");
    }
}

void apply_run_file(const fs::path& path, RunConfig& c) {
    const json j = read_json(path);
    if (!j.is_object()) throw FormatError("run file " + path.string() + " must hold a JSON object");
    try {
        if (j.contains("model_spec")) c.model = load_model_spec(j.at("model_spec"), path.parent_path());
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("out")) c.out = j.at("out").get<std::string>();
        if (j.contains("space")) c.space = j.at("space").get<std::string>();
        if (j.contains("policies")) c.policies = j.at("policies").get<std::vector<std::string>>();
        if (j.contains("budgets")) c.budgets = j.at("budgets").get<std::vector<std::uint64_t>>();
        if (j.contains("metric")) c.metric = calib::parse_metric(j.at("metric").get<std::string>());
        if (j.contains("scorer")) c.calibration_scorer = eviction::parse_scorer(j.at("scorer").get<std::string>());
        if (j.contains("decode_scorer")) {
            c.decode_scorer = eviction::parse_scorer(j.at("decode_scorer").get<std::string>());
        }
        if (j.contains("validate_kl")) c.validate_kl = j.at("validate_kl").get<bool>();
        if (j.contains("oracle_check")) c.oracle_check = j.at("oracle_check").get<bool>();
        if (j.contains("t_cache")) c.t_cache = j.at("t_cache").get<std::size_t>();
        if (j.contains("steps")) c.steps = j.at("steps").get<std::size_t>();
        if (j.contains("prompt_lengths")) c.prompt_lengths = j.at("prompt_lengths").get<std::vector<std::size_t>>();
        if (j.contains("eviction_period")) c.eviction_period = j.at("eviction_period").get<std::size_t>();
        if (j.contains("heldout_count")) c.heldout_count = j.at("heldout_count").get<std::size_t>();
        if (j.contains("heldout_length")) c.heldout_length = j.at("heldout_length").get<std::size_t>();
        if (j.contains("threads")) c.threads = j.at("threads").get<std::size_t>();
    } catch (const json::exception& e) {
        throw ConfigError("invalid run file " + path.string() + ": " + e.what());
    }
}

int cmd_calibrate(const RunConfig& c, std::ostream& log) {
    c.validate();
    ensure_dir(c.out);
    const ToyModel model(c.model);
    const auto space = calib::ConfigSpace::by_name(c.space);
    const auto options = calibration_options(c);

    const auto l2 = calib::calibrate_l2(model, calibration_prompt(c.model), space, options);
    std::optional<calib::SensitivityTable> kl;
    if (c.validate_kl || c.metric == calib::Metric::kKl) {
        const auto heldout = calib::heldout_sequences(c.model, c.heldout_count, c.heldout_length, c.seed);
        kl = calib::calibrate_kl(model, heldout, space, options);
    }

    calib::save_table(table_path(c, calib::Metric::kL2Proxy), l2);
    calib::write_table_csv(c.out / "sensitivity_l2.csv", l2);
    write_json(c.out / "heterogeneity_l2.json", calib::to_json(calib::heterogeneity_stats(l2, calib::table2_ops())));
    log << "wrote " << table_path(c, calib::Metric::kL2Proxy).string() << " (" << l2.num_layers << " x "
        << l2.space.size() << ")\n";
    if (kl) {
        calib::save_table(table_path(c, calib::Metric::kKl), *kl);
        calib::write_table_csv(c.out / "sensitivity_kl.csv", *kl);
        write_json(c.out / "heterogeneity_kl.json", calib::to_json(calib::heterogeneity_stats(*kl, calib::table2_ops())));
        log << "wrote " << table_path(c, calib::Metric::kKl).string() << '\n';
    }
    if (c.validate_kl) {
        const auto report = calib::correlate(l2, *kl);
        write_json(c.out / "correlation.json", calib::to_json(report));
        log << "mean per-layer pearson " << (report.mean_layer_pearson ? num(*report.mean_layer_pearson) : "n/a")
            << ", spearman " << (report.mean_layer_spearman ? num(*report.mean_layer_spearman) : "n/a") << '\n';
    }
    return kOk;
}

int cmd_solve(const RunConfig& c, std::ostream& log) {
    c.validate();
    const fs::path tpath = c.table.empty() ? table_path(c, c.metric) : c.table;
    const auto table = calib::load_table(tpath, c.model.hash());
    ensure_dir(c.out / "plans");
    const auto dims = solver::CacheDims::from_spec(c.model, c.t_cache);

    json rows = json::array();
    std::string csv = "policy,b,M_bytes,status,predicted_bytes,predicted_sensitivity,keep1_fraction,deficit_bytes\n";
    std::size_t feasible = 0;
    std::map<std::uint64_t, std::map<solver::Policy, double>> greedy_totals;
    for (auto b : c.budgets) {
        for (const auto& name : c.policies) {
            const auto policy = solver::parse_policy(name);
            const auto budget = solver::budget_from_tokens(b, policy, dims);
            json row = {{"policy", name}, {"b", b}, {"M_bytes", budget.bytes}};
            try {
                const auto plan = solver::solve_greedy(table, budget, policy, dims);
                solver::save_plan(c.out / "plans" / (plan_stem(policy, b) + ".json"), plan);
                std::size_t keep1 = 0;
                for (const auto& l : plan.layers) keep1 += l.config.keep.is_identity() ? 1 : 0;
                const double frac = static_cast<double>(keep1) / static_cast<double>(plan.layers.size());
                row["status"] = "ok";
                row["predicted_bytes"] = plan.total_memory;
                row["predicted_sensitivity"] = plan.total_sensitivity;
                row["keep1_fraction"] = frac;
                csv += name + ',' + std::to_string(b) + ',' + std::to_string(budget.bytes) + ",ok," +
                       num(plan.total_memory, 12) + ',' + num(plan.total_sensitivity, 9) + ',' + num(frac) + ",\n";
                greedy_totals[b][policy] = plan.total_sensitivity;
                ++feasible;
            } catch (const InfeasibleError& e) {
                row["status"] = "infeasible";
                row["deficit_bytes"] = e.deficit_bytes();
                csv += name + ',' + std::to_string(b) + ',' + std::to_string(budget.bytes) + ",infeasible,,,," +
                       num(e.deficit_bytes(), 12) + '\n';
            }
            rows.push_back(std::move(row));
        }
    }

    json doc = {{"format_version", 1},
                {"model_spec_hash", table.model_spec_hash},
                {"metric", calib::metric_name(table.metric)},
                {"t_cache", c.t_cache},
                {"rows", rows}};
    write_json(c.out / "memory_table.json", doc);
    write_text(c.out / "memory_table.csv", csv);

    if (c.oracle_check) {
        json check = {{"format_version", 1}};
        if (table.num_layers > 4) {
            check["status"] = "skipped";
            check["reason"] = "exhaustive search is limited to 4 layers, table has " + std::to_string(table.num_layers);
        } else {
            json entries = json::array();
            bool ordered = true;
            for (auto b : c.budgets) {
                json e = {{"b", b}};
                std::map<solver::Policy, double> s;
                for (auto p : {solver::Policy::k2dUniform, solver::Policy::k2d, solver::Policy::k2dHetero}) {
                    // Same byte budget for all three so their feasible sets nest.
                    const auto budget = solver::budget_from_tokens(b, solver::Policy::k2d, dims);
                    try {
                        s[p] = solver::solve_oracle(table, budget, p, dims).total_sensitivity;
                        e[std::string(solver::policy_name(p))] = s[p];
                    } catch (const InfeasibleError&) {
                        e[std::string(solver::policy_name(p))] = nullptr;
                    }
                }
                if (s.size() == 3) {
                    const bool ok = s[solver::Policy::k2dHetero] <= s[solver::Policy::k2d] &&
                                    s[solver::Policy::k2d] <= s[solver::Policy::k2dUniform];
                    e["ordered"] = ok;
                    ordered = ordered && ok;
                }
                entries.push_back(std::move(e));
            }
            check["status"] = ordered ? "ok" : "violated";
            check["budgets"] = std::move(entries);
        }
        write_json(c.out / "oracle_check.json", check);
        log << "oracle check: " << check["status"].get<std::string>() << '\n';
    }

    log << "solved " << feasible << " of " << rows.size() << " (policy, budget) pairs\n";
    if (feasible == 0) {
        log << "every (policy, budget) pair is infeasible\n";
        return kInfeasible;
    }
    return kOk;
}

int cmd_simulate(const RunConfig& c, std::ostream& log) {
    c.validate();
    std::vector<fs::path> plan_files = c.plans;
    if (plan_files.empty()) {
        const fs::path dir = c.out / "plans";
        if (!fs::is_directory(dir)) throw IoError("no plans directory at " + dir.string());
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (entry.path().extension() == ".json") plan_files.push_back(entry.path());
        }
        std::sort(plan_files.begin(), plan_files.end());
        if (plan_files.empty()) throw InputError("no plan files in " + dir.string());
    }
    std::vector<solver::RoutingPlan> plans;
    for (const auto& p : plan_files) {
        if (!fs::exists(p)) throw IoError("plan file not found: " + p.string());
        plans.push_back(solver::load_plan(p));
        if (!plans.back().model_spec_hash.empty() && plans.back().model_spec_hash != c.model.hash()) {
            throw StaleCalibrationError("plan " + p.string() + " was built for a different model");
        }
    }

    ensure_dir(c.out / "traces");
    const ToyModel model(c.model);
    decode::DecodeOptions options;
    options.scorer = c.decode_scorer;
    options.seed = c.seed;
    options.eviction_period = c.eviction_period;

    json aggregate = json::object();
    json ablation = json::array();
    for (std::size_t len : c.prompt_lengths) {
        const auto prompt = simulation_prompt(c, len);
        std::vector<decode::PlanRun> runs;
        for (std::size_t i = 0; i < plans.size(); ++i) {
            auto trace = decode::decode(model, prompt, plans[i], c.steps, options);
            write_json(c.out / "traces" / (plan_files[i].stem().string() + "_p" + std::to_string(len) + ".json"),
                       decode::to_json(trace));
            runs.push_back({plans[i], std::move(trace)});
        }
        const auto rows = decode::memory_report(runs);
        const std::string suffix = "_p" + std::to_string(len);
        write_text(c.out / ("simulation" + suffix + ".csv"), decode::report_csv(rows));
        aggregate[std::to_string(len)] = decode::to_json(rows);

        std::map<std::uint64_t, std::map<solver::Policy, std::pair<double, double>>> by_budget;
        for (const auto& run : runs) {
            if (!run.plan.budget.tokens) continue;
            by_budget[*run.plan.budget.tokens][run.plan.policy] = {run.trace.mean_kl, run.plan.total_sensitivity};
        }
        for (const auto& [b, results] : by_budget) {
            std::map<solver::Policy, double> kl;
            std::map<solver::Policy, double> sens;
            for (const auto& [p, v] : results) {
                kl[p] = v.first;
                sens[p] = v.second;
            }
            if (!kl.count(solver::Policy::k2dUniform) || !kl.count(solver::Policy::k2d) ||
                !kl.count(solver::Policy::k2dHetero)) {
                continue;
            }
            const auto dk = solver::ablation_deltas(kl);
            const auto ds = solver::ablation_deltas(sens);
            ablation.push_back({{"prompt_length", len},
                                {"b", b},
                                {"mean_kl", {{"delta_quant", dk.quant}, {"delta_evict", dk.evict}}},
                                {"predicted_sensitivity", {{"delta_quant", ds.quant}, {"delta_evict", ds.evict}}}});
        }
        log << "simulated " << runs.size() << " plans on a " << len << "-token prompt\n";
    }
    write_json(c.out / "simulation.json", {{"format_version", 1}, {"steps", c.steps}, {"by_prompt_length", aggregate}});
    write_json(c.out / "ablation.json", {{"format_version", 1}, {"rows", ablation}});
    return kOk;
}

int cmd_report(const RunConfig& c, std::ostream& log) {
    const fs::path& dir = c.out;
    if (!fs::is_directory(dir)) throw InputError("run directory " + dir.string() + " does not exist");
    std::ostringstream md;
    std::string csv = "section,item,field,value\n";
    std::size_t sections = 0;
    md << "# Run report\n";

    for (auto metric : {calib::Metric::kL2Proxy, calib::Metric::kKl}) {
        const fs::path p = table_path(c, metric);
        if (!fs::exists(p)) continue;
        const auto table = calib::load_table(p);
        const auto stats = calib::heterogeneity_stats(table, calib::table2_ops());
        const std::string tag(calib::metric_name(table.metric));
        md << "\n## Per-op heterogeneity (" << tag << ")\n\n| op | min | max | max/min |\n|---|---|---|---|\n";
        for (const auto& s : stats) {
            md << "| " << s.op << " | " << num(s.min, 4) << " | " << num(s.max, 4) << " | " << num(s.ratio, 4)
               << " |\n";
            csv += "heterogeneity_" + tag + ',' + s.op + ",min," + num(s.min, 9) + '\n';
            csv += "heterogeneity_" + tag + ',' + s.op + ",max," + num(s.max, 9) + '\n';
            csv += "heterogeneity_" + tag + ',' + s.op + ",ratio," + num(s.ratio, 9) + '\n';
        }
        ++sections;
    }

    if (fs::exists(dir / "memory_table.json")) {
        const json doc = read_json(dir / "memory_table.json");
        md << "\n## Memory (T_cache = " << doc.value("t_cache", 0) << ")\n\n"
           << "| policy | b | budget bytes | predicted bytes | predicted sensitivity | keep=1.0 layers |\n"
           << "|---|---|---|---|---|---|\n";
        for (const auto& r : doc.at("rows")) {
            const std::string item = r.at("policy").get<std::string>() + "@" + std::to_string(r.at("b").get<int>());
            if (r.at("status") == "ok") {
                md << "| " << r.at("policy").get<std::string>() << " | " << r.at("b") << " | " << r.at("M_bytes")
                   << " | " << num(r.at("predicted_bytes").get<double>(), 12) << " | "
                   << num(r.at("predicted_sensitivity").get<double>(), 4) << " | "
                   << num(100.0 * r.at("keep1_fraction").get<double>(), 4) << "% |\n";
                csv += "memory," + item + ",predicted_bytes," + num(r.at("predicted_bytes").get<double>(), 12) + '\n';
                csv += "memory," + item + ",predicted_sensitivity," +
                       num(r.at("predicted_sensitivity").get<double>(), 9) + '\n';
            } else {
                md << "| " << r.at("policy").get<std::string>() << " | " << r.at("b") << " | " << r.at("M_bytes")
                   << " | infeasible | | |\n";
                csv += "memory," + item + ",status,infeasible\n";
            }
        }
        ++sections;
    }

    if (fs::exists(dir / "ablation.json")) {
        const json doc = read_json(dir / "ablation.json");
        md << "\n## Ablation deltas\n\n| prompt | b | d_quant (KL) | d_evict (KL) | d_quant (S) | d_evict (S) |\n"
           << "|---|---|---|---|---|---|\n";
        for (const auto& r : doc.at("rows")) {
            const auto& k = r.at("mean_kl");
            const auto& s = r.at("predicted_sensitivity");
            md << "| " << r.at("prompt_length") << " | " << r.at("b") << " | "
               << num(k.at("delta_quant").get<double>(), 4) << " | " << num(k.at("delta_evict").get<double>(), 4)
               << " | " << num(s.at("delta_quant").get<double>(), 4) << " | "
               << num(s.at("delta_evict").get<double>(), 4) << " |\n";
            const std::string item = "p" + std::to_string(r.at("prompt_length").get<int>()) + "@" +
                                     std::to_string(r.at("b").get<int>());
            csv += "ablation," + item + ",kl_delta_quant," + num(k.at("delta_quant").get<double>(), 9) + '\n';
            csv += "ablation," + item + ",kl_delta_evict," + num(k.at("delta_evict").get<double>(), 9) + '\n';
        }
        ++sections;
    }

    if (fs::exists(dir / "correlation.json")) {
        const json doc = read_json(dir / "correlation.json");
        auto show = [](const json& v) { return v.is_null() ? std::string("n/a") : num(v.get<double>(), 4); };
        md << "\n## Proxy vs KL correlation\n\n| layer | pearson | spearman |\n|---|---|---|\n";
        const auto& pr = doc.at("layer_pearson");
        const auto& sr = doc.at("layer_spearman");
        for (std::size_t l = 0; l < pr.size(); ++l) {
            md << "| " << l << " | " << show(pr[l]) << " | " << show(sr[l]) << " |\n";
            csv += "correlation,layer" + std::to_string(l) + ",pearson," + show(pr[l]) + '\n';
            csv += "correlation,layer" + std::to_string(l) + ",spearman," + show(sr[l]) + '\n';
        }
        md << "\nmean pearson " << show(doc.at("mean_layer_pearson")) << ", mean spearman "
           << show(doc.at("mean_layer_spearman")) << ", mean per-config pearson "
           << show(doc.at("mean_config_pearson")) << "\n";
        ++sections;
    }

    if (sections == 0) throw InputError("no run outputs found in " + dir.string());
    write_text(dir / "report.md", md.str());
    write_text(dir / "report.csv", csv);
    log << "wrote " << (dir / "report.md").string() << " with " << sections << " sections\n";
    return kOk;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Per-layer KV-cache compression routing on a toy transformer"};
    app.require_subcommand(1);

    std::string config_file;
    std::string model_spec;
    std::string out_dir;
    std::string space;
    std::string metric;
    std::string scorer;
    std::string decode_scorer;
    std::string table;
    std::uint64_t seed = 0;
    std::vector<std::string> policies;
    std::vector<std::uint64_t> budgets;
    std::vector<std::size_t> prompt_lengths;
    std::vector<std::string> plans;
    std::size_t t_cache = 0;
    std::size_t steps = 0;
    std::size_t beta = 0;
    std::size_t heldout_count = 0;
    std::size_t heldout_length = 0;
    std::size_t threads = 0;
    bool validate_kl = false;
    bool oracle_check = false;

    auto add_shared = [&](CLI::App* sub) {
        sub->add_option("--config", config_file, "JSON run file; flags override its values");
        sub->add_option("--model-spec", model_spec, "model spec JSON file");
        sub->add_option("--seed", seed, "seed for calibration, prompts and scorers");
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option("--space", space, "config space: full, table2 or calib11");
        sub->add_option("--policies", policies, "comma-separated policies")->delimiter(',');
        sub->add_option("--budgets", budgets, "comma-separated token budgets")->delimiter(',');
        sub->add_option("--metric", metric, "sensitivity metric: l2 or kl");
        sub->add_option("--scorer", scorer, "calibration eviction scorer: attn_accum, trig or random_perm");
        sub->add_option("--decode-scorer", decode_scorer, "decode-time eviction scorer");
        sub->add_flag("--validate-kl", validate_kl, "also build the KL table and correlation report");
        sub->add_flag("--oracle-check", oracle_check, "verify policy ordering with the exhaustive solver");
        sub->add_option("--t-cache", t_cache, "uncompressed tokens per layer for memory accounting");
        sub->add_option("--steps", steps, "decode steps");
        sub->add_option("--prompt-lens", prompt_lengths, "comma-separated prompt lengths")->delimiter(',');
        sub->add_option("--beta", beta, "eviction period in tokens");
        sub->add_option("--heldout-count", heldout_count, "held-out sequences for the KL table");
        sub->add_option("--heldout-length", heldout_length, "tokens per held-out sequence");
        sub->add_option("--threads", threads, "calibration worker threads (0 = all cores)");
        sub->add_option("--table", table, "sensitivity table to solve with");
        sub->add_option("--plans", plans, "plan files to simulate")->delimiter(',');
    };

    auto* calibrate = app.add_subcommand("calibrate", "build sensitivity tables");
    auto* solve = app.add_subcommand("solve", "route layers under each budget");
    auto* simulate = app.add_subcommand("simulate", "decode with each routing plan");
    auto* report = app.add_subcommand("report", "summarize a run directory");
    for (auto* sub : {calibrate, solve, simulate, report}) add_shared(sub);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kConfigError;
    }

    CLI::App* sub = app.get_subcommands().front();
    auto given = [&](const char* flag) { return sub->count(flag) > 0; };
    try {
        RunConfig c;
        if (given("--config")) apply_run_file(config_file, c);
        if (given("--model-spec")) c.model = load_model_spec(json(model_spec), fs::current_path());
        if (given("--seed")) c.seed = seed;
        if (given("--out")) c.out = out_dir;
        if (given("--space")) c.space = space;
        if (given("--policies")) c.policies = policies;
        if (given("--budgets")) c.budgets = budgets;
        if (given("--metric")) c.metric = calib::parse_metric(metric);
        if (given("--scorer")) c.calibration_scorer = eviction::parse_scorer(scorer);
        if (given("--decode-scorer")) c.decode_scorer = eviction::parse_scorer(decode_scorer);
        if (given("--validate-kl")) c.validate_kl = validate_kl;
        if (given("--oracle-check")) c.oracle_check = oracle_check;
        if (given("--t-cache")) c.t_cache = t_cache;
        if (given("--steps")) c.steps = steps;
        if (given("--prompt-lens")) c.prompt_lengths = prompt_lengths;
        if (given("--beta")) c.eviction_period = beta;
        if (given("--heldout-count")) c.heldout_count = heldout_count;
        if (given("--heldout-length")) c.heldout_length = heldout_length;
        if (given("--threads")) c.threads = threads;
        if (given("--table")) c.table = table;
        if (given("--plans")) c.plans.assign(plans.begin(), plans.end());

        if (sub == calibrate) return cmd_calibrate(c, out);
        if (sub == solve) return cmd_solve(c, out);
        if (sub == simulate) return cmd_simulate(c, out);
        return cmd_report(c, out);
    } catch (const ConfigError& e) {
        err << "configuration error: " << e.what() << '\n';
        return kConfigError;
    } catch (const InfeasibleError& e) {
        err << "infeasible: " << e.what() << '\n';
        return kInfeasible;
    } catch (const IoError& e) {
        err << "I/O error: " << e.what() << '\n';
        return kIoError;
    } catch (const FormatError& e) {
        err << "format error: " << e.what() << '\n';
        return kFormatError;
    } catch (const InputError& e) {
        err << "input error: " << e.what() << '\n';
        return kInputError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kGenericError;
    }
}

}  // namespace moend::cli
