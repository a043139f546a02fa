// SPDX-License-Identifier: Apache-2.0
#include "sop2/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"

namespace sop2 {

namespace {

std::string fmt_double(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::map<std::string, std::string> parse_kv(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) continue;
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

RunConfig load_run_config(const std::string& path) {
    if (path.empty()) return RunConfig{};
    return RunConfig::parse_file(path);
}

void require_new_file(const std::string& path, bool force) {
    if (!force && std::filesystem::exists(path)) {
        throw DataError("refusing to overwrite existing file '" + path +
                        "' (pass --force to allow)");
    }
}

std::string describe_mode_conflict(PromptMode configured, PromptMode implied) {
    return std::string("config prompt_mode=") + to_string(configured) +
           " conflicts with the tuning mode's mechanism (" + to_string(implied) + ")";
}

// ---- gen-data ---------------------------------------------------------------

int cmd_gen_data(const std::string& config_path, std::uint64_t seed, const std::string& domain,
                 int scenes, const std::string& out, bool force) {
    if (scenes < 1) throw UsageError("--scenes must be at least 1");
    if (domain != "source" && domain != "target") {
        throw UsageError("--domain must be 'source' or 'target'");
    }
    RunConfig rc = load_run_config(config_path);
    const DomainParams& params = domain == "source" ? rc.source : rc.target;
    require_new_file(out, force);

    std::vector<Scene> all;
    for (int i = 0; i < scenes; ++i) {
        auto [pc, label] = gen_scene(seed + static_cast<std::uint64_t>(i), params,
                                     rc.model.extent);
        all.push_back({std::move(pc), std::move(label)});
    }
    write_scene_archive_file(out, all, params, rc.model.extent, domain, seed);
    std::cout << "wrote " << scenes << " " << domain << " scenes to " << out << "\n";
    return kExitOk;
}

}  // namespace

void write_scene_archive_file(const std::string& path, const std::vector<Scene>& scenes,
                              const DomainParams& params, const Extent& extent,
                              const std::string& domain_name, std::uint64_t seed) {
    std::string header;
    header += "archive=scenes\n";
    header += "domain=" + domain_name + "\n";
    header += "scenes=" + std::to_string(scenes.size()) + "\n";
    header += "seed=" + std::to_string(seed) + "\n";
    header += "density=" + fmt_double(params.density) + "\n";
    header += "sensor_height=" + fmt_double(params.sensor_height) + "\n";
    header += "intensity_bias=" + fmt_double(params.intensity_bias) + "\n";
    header += "box_scale=" + fmt_double(params.box_scale) + "\n";
    header += "class_mix=" + fmt_double(params.class_mix[0]) + "," +
              fmt_double(params.class_mix[1]) + "," + fmt_double(params.class_mix[2]) + "\n";
    header += "extent_x=" + fmt_double(extent.x_max) + "\n";
    header += "extent_y=" + fmt_double(extent.y_max) + "\n";
    header += "extent_z=" + fmt_double(extent.z_max) + "\n";
    checkpoint_write_file(path, archive_from_scenes(header, scenes, extent));
}

std::vector<Scene> read_scene_archive_file(const std::string& path,
                                           const Extent& expected_extent) {
    CheckpointData data = checkpoint_read_file(path);
    auto kv = parse_kv(data.config_text);
    if (kv["archive"] != "scenes") {
        throw DataError("'" + path + "' is not a scene archive");
    }
    for (const auto& [key, expect] :
         std::initializer_list<std::pair<std::string, double>>{
             {"extent_x", expected_extent.x_max},
             {"extent_y", expected_extent.y_max},
             {"extent_z", expected_extent.z_max}}) {
        auto it = kv.find(key);
        if (it != kv.end() && std::fabs(std::stod(it->second) - expect) > 1e-9) {
            throw DataError("archive '" + path + "' was generated for " + key + "=" + it->second +
                            " but the run config expects " + fmt_double(expect));
        }
    }
    return scenes_from_archive(data, expected_extent);
}

PromptMode implied_prompt_mode(TuningMode mode) {
    switch (mode) {
        case TuningMode::prompt_token: return PromptMode::token;
        case TuningMode::prompt_generator: return PromptMode::generator;
        case TuningMode::sop2:
        case TuningMode::sop2_plus_lora: return PromptMode::pool;
        default: return PromptMode::none;
    }
}

Model build_model_for_mode(const RunConfig& rc, TuningMode mode) {
    ModelConfig cfg = rc.model;
    const PromptMode implied = implied_prompt_mode(mode);
    if (implied != PromptMode::none) {
        if (cfg.prompt_mode != PromptMode::none && cfg.prompt_mode != implied) {
            throw ConfigError(describe_mode_conflict(cfg.prompt_mode, implied));
        }
        cfg.prompt_mode = implied;
    }
    Model m = Model::build(cfg);
    if (mode == TuningMode::lora || mode == TuningMode::sop2_plus_lora) {
        lora_wrap_model(m);
    }
    return m;
}

LoadStats apply_pretrained(Model& model, const RunConfig& rc, const std::string& ckpt_path) {
    CheckpointData data = checkpoint_read_file(ckpt_path);
    RunConfig stored = RunConfig::parse_text(data.config_text);
    if (stored.backbone_signature() != rc.backbone_signature()) {
        throw DataError("checkpoint '" + ckpt_path +
                        "' does not match the run configuration.\n--- checkpoint backbone ---\n" +
                        stored.backbone_signature() + "--- requested backbone ---\n" +
                        rc.backbone_signature());
    }
    std::vector<NamedParam> params = model.parameters();
    // Tensors only the fine-tuned model carries (prompts, adapters) stay
    // at their fresh initialization.
    std::vector<NamedParam> loadable;
    std::vector<std::string> file_only;
    for (const CheckpointEntry& e : data.entries) {
        const bool in_model = std::any_of(params.begin(), params.end(), [&](const NamedParam& p) {
            return p.name == e.name;
        });
        if (!in_model) file_only.push_back(e.name);
    }
    if (!file_only.empty()) {
        throw DataError("checkpoint '" + ckpt_path + "' carries tensors absent from the model (" +
                        file_only.front() + ", " + std::to_string(file_only.size()) +
                        " total); refusing a partial architecture match");
    }
    return checkpoint_load_params(data, params);
}

namespace {

// ---- train ------------------------------------------------------------------

struct TrainArgs {
    std::string config_path;
    std::string data_path;
    std::string mode = "sop2";
    std::string pretrained;
    std::string out;
    std::string log_path;
    double fraction = -1.0;  // <0: take from config
    int epochs = -1;
    double lr = -1.0;
    long long seed = -1;
};

int cmd_train(const TrainArgs& args) {
    RunConfig rc = load_run_config(args.config_path);
    if (args.fraction >= 0) rc.train.fraction = args.fraction;
    if (args.epochs >= 0) rc.train.epochs = args.epochs;
    if (args.lr >= 0) rc.train.lr = args.lr;
    if (args.seed >= 0) rc.model.seed = static_cast<std::uint64_t>(args.seed);
    rc.train.mode = args.mode;

    const TuningMode mode = tuning_mode_from_string(args.mode);
    if (mode != TuningMode::from_scratch && args.pretrained.empty()) {
        throw ConfigError(std::string("tuning mode ") + to_string(mode) +
                          " fine-tunes a pretrained model; pass --pretrained");
    }

    Model model = build_model_for_mode(rc, mode);
    rc.model.prompt_mode = model.cfg.prompt_mode;  // record the resolved mechanism
    if (!args.pretrained.empty()) {
        LoadStats stats = apply_pretrained(model, rc, args.pretrained);
        std::cout << "loaded " << stats.loaded << " tensors from " << args.pretrained;
        if (stats.fresh > 0) std::cout << " (" << stats.fresh << " fresh)";
        std::cout << "\n";
    }

    std::vector<Scene> scenes = read_scene_archive_file(args.data_path, rc.model.extent);

    OptimizerConfig oc;
    oc.lr = rc.train.lr;
    oc.warmup_frac = rc.train.warmup_frac;
    TrainLog log = train(model, scenes, mode, oc, rc.train.epochs, rc.train.fraction);

    ParamReport report = count_params(model, mode);
    std::cout << report.table();
    if (!log.epochs.empty()) {
        std::cout << "loss: initial " << log.initial_loss << " final " << log.final_loss()
                  << "\n";
    }

    checkpoint_write_file(args.out,
                          checkpoint_from_params(rc.canonical(), model.parameters()));
    const std::string log_path = args.log_path.empty() ? args.out + ".log" : args.log_path;
    std::ofstream lf(log_path, std::ios::trunc);
    if (!lf) throw DataError("cannot open train log '" + log_path + "'");
    for (const EpochRecord& e : log.epochs) {
        lf << "epoch=" << e.epoch << " loss=" << fmt_double(e.mean_loss)
           << " lr=" << fmt_double(e.lr) << " mode=" << to_string(mode) << " seed=" << log.seed
           << "\n";
    }
    std::cout << "wrote checkpoint " << args.out << " and log " << log_path << "\n";
    return kExitOk;
}

// ---- eval ---------------------------------------------------------------

std::pair<Model, RunConfig> model_from_checkpoint(const std::string& ckpt_path) {
    CheckpointData data = checkpoint_read_file(ckpt_path);
    RunConfig rc = RunConfig::parse_text(data.config_text);
    const TuningMode mode = tuning_mode_from_string(rc.train.mode);
    Model model = build_model_for_mode(rc, mode);
    std::vector<NamedParam> params = model.parameters();
    checkpoint_load_params(data, params);
    return {std::move(model), std::move(rc)};
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path) {
    auto [model, rc] = model_from_checkpoint(ckpt_path);
    std::vector<Scene> scenes = read_scene_archive_file(data_path, rc.model.extent);
    EvalMetrics m = evaluate(model, scenes);
    std::cout << m.table();
    return kExitOk;
}

// ---- count-params -------------------------------------------------------

int cmd_count_params(const std::string& config_path, const std::string& mode_name,
                     const std::string& out) {
    RunConfig rc = load_run_config(config_path);
    const TuningMode mode = tuning_mode_from_string(mode_name);
    Model model = build_model_for_mode(rc, mode);
    ParamReport report = count_params(model, mode);
    std::cout << report.table();
    if (!out.empty()) {
        std::ofstream f(out, std::ios::trunc);
        if (!f) throw DataError("cannot open '" + out + "' for writing");
        f << report.key_values();
    }
    return kExitOk;
}

// ---- export-embeddings ----------------------------------------------------

int cmd_export_embeddings(const std::string& ckpt_path, const std::string& data_path,
                          const std::string& what, const std::string& out) {
    if (what != "sets" && what != "pools") {
        throw UsageError("--what must be 'sets' or 'pools'");
    }
    auto [model, rc] = model_from_checkpoint(ckpt_path);
    std::ofstream f(out, std::ios::trunc);
    if (!f) throw DataError("cannot open '" + out + "' for writing");
    const int c = model.cfg.channels;

    if (what == "pools") {
        bool any = false;
        f << "partition,entry,slot";
        for (int j = 0; j < c; ++j) f << ",c" << j;
        f << "\n";
        for (std::size_t i = 0; i < model.partitions.size(); ++i) {
            const auto& pool = model.partitions[i].prompt_pool;
            if (!pool) continue;
            any = true;
            for (int m = 0; m < pool->size; ++m) {
                for (int slot = 0; slot < pool->prompt_length; ++slot) {
                    f << (i + 1) << "," << m << "," << slot;
                    for (int ch = 0; ch < c; ++ch) {
                        f << "," << fmt_double(pool->values.at(m * pool->prompt_length + slot, ch));
                    }
                    f << "\n";
                }
            }
        }
        if (!any) {
            throw ConfigError("checkpoint carries no prompt pools to export");
        }
    } else {
        if (data_path.empty()) throw UsageError("--what sets requires --data");
        std::vector<Scene> scenes = read_scene_archive_file(data_path, rc.model.extent);
        f << "partition,set";
        for (int j = 0; j < c; ++j) f << ",c" << j;
        f << "\n";
        std::vector<long> set_counter(static_cast<std::size_t>(model.cfg.total_partitions()), 0);
        for (const Scene& s : scenes) {
            std::vector<std::vector<std::vector<double>>> taps;
            ForwardOptions opts;
            opts.set_mean_taps = &taps;
            model_forward(model, s.pc, opts);
            for (std::size_t j = 0; j < taps.size(); ++j) {
                for (const auto& mean : taps[j]) {
                    f << (j + 1) << "," << set_counter[j]++;
                    for (double v : mean) f << "," << fmt_double(v);
                    f << "\n";
                }
            }
        }
    }
    std::cout << "wrote " << out << "\n";
    return kExitOk;
}

// ---- sweep ------------------------------------------------------------------

struct SweepArgs {
    std::string param;
    std::string values_csv;
    std::string config_path;
    std::string data_path;
    std::string eval_data_path;
    std::string pretrained;
    std::string mode = "sop2";
    std::string out;
    int epochs = -1;
};

int cmd_sweep(const SweepArgs& args) {
    static const std::vector<std::string> kParams = {"M", "n_P", "K", "fraction"};
    if (std::find(kParams.begin(), kParams.end(), args.param) == kParams.end()) {
        throw UsageError("--param must be one of M, n_P, K, fraction");
    }
    std::vector<double> values;
    {
        std::stringstream ss(args.values_csv);
        std::string item;
        while (std::getline(ss, item, ',')) {
            try {
                values.push_back(std::stod(item));
            } catch (const std::exception&) {
                throw UsageError("bad sweep value '" + item + "'");
            }
        }
    }
    if (values.empty()) throw UsageError("--values is empty");
    if (args.param != "fraction") {
        for (double v : values) {
            if (v != std::floor(v) || v < 1.0) {
                throw UsageError("--param " + args.param + " needs positive integer values");
            }
        }
    }
    std::sort(values.begin(), values.end());

    struct Row {
        double value;
        double final_loss;
        double mean_f1;
    };
    std::vector<Row> rows;
    for (double v : values) {
        RunConfig rc = load_run_config(args.config_path);
        rc.train.mode = args.mode;
        if (args.epochs >= 0) rc.train.epochs = args.epochs;
        if (args.param == "M") rc.model.pool_m = static_cast<int>(v);
        else if (args.param == "n_P") rc.model.pool_n_p = static_cast<int>(v);
        else if (args.param == "K") rc.model.pool_k = static_cast<int>(v);
        else rc.train.fraction = v;

        const TuningMode mode = tuning_mode_from_string(args.mode);
        Model model = build_model_for_mode(rc, mode);
        if (!args.pretrained.empty()) {
            apply_pretrained(model, rc, args.pretrained);
        } else if (mode != TuningMode::from_scratch) {
            throw ConfigError("sweep over a fine-tuning mode needs --pretrained");
        }
        std::vector<Scene> scenes = read_scene_archive_file(args.data_path, rc.model.extent);
        OptimizerConfig oc;
        oc.lr = rc.train.lr;
        oc.warmup_frac = rc.train.warmup_frac;
        TrainLog log = train(model, scenes, mode, oc, rc.train.epochs, rc.train.fraction);

        const std::string eval_path =
            args.eval_data_path.empty() ? args.data_path : args.eval_data_path;
        std::vector<Scene> eval_scenes = read_scene_archive_file(eval_path, rc.model.extent);
        EvalMetrics metrics = evaluate(model, eval_scenes);
        rows.push_back({v, log.final_loss(), metrics.mean_f1});
        std::cout << args.param << "=" << v << " final_loss=" << log.final_loss()
                  << " mean_f1=" << metrics.mean_f1 << "\n";
    }

    std::ostringstream report;
    report << args.param << ",final_loss,mean_f1\n";
    for (const Row& r : rows) {
        report << fmt_double(r.value) << "," << fmt_double(r.final_loss) << ","
               << fmt_double(r.mean_f1) << "\n";
    }
    if (!args.out.empty()) {
        std::ofstream f(args.out, std::ios::trunc);
        if (!f) throw DataError("cannot open '" + args.out + "' for writing");
        f << report.str();
        std::cout << "wrote " << args.out << "\n";
    } else {
        std::cout << report.str();
    }
    return kExitOk;
}

// ---- bench ------------------------------------------------------------------

int cmd_bench(const std::string& config_path, int repeat, std::uint64_t seed) {
    if (repeat < 1) throw UsageError("--repeat must be at least 1");
    RunConfig rc = load_run_config(config_path);
    auto [pc, label] = gen_scene(seed, rc.source, rc.model.extent);
    (void)label;

    auto time_forward = [&](const Model& m) {
        model_forward(m, pc);  // warm-up
        const auto t0 = std::chrono::steady_clock::now();
        for (int i = 0; i < repeat; ++i) model_forward(m, pc);
        const auto t1 = std::chrono::steady_clock::now();
        return std::chrono::duration<double, std::milli>(t1 - t0).count() / repeat;
    };

    RunConfig base = rc;
    base.model.prompt_mode = PromptMode::none;
    Model baseline = Model::build(base.model);
    const double base_ms = time_forward(baseline);

    RunConfig pooled = rc;
    pooled.model.prompt_mode = PromptMode::pool;
    Model with_pool = Model::build(pooled.model);
    const double pool_ms = time_forward(with_pool);

    std::cout << "forward (" << repeat << " runs, " << pc.points.size() << " points)\n";
    std::printf("  baseline:    %.3f ms\n", base_ms);
    std::printf("  prompt pool: %.3f ms (+%.1f%%)\n", pool_ms,
                100.0 * (pool_ms - base_ms) / std::max(base_ms, 1e-9));
    return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"scene-oriented prompt-pool transfer learning for sparse voxel detection"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic scene archive");
    std::string gen_config, gen_domain = "source", gen_out;
    std::uint64_t gen_seed = 0;
    int gen_scenes = 16;
    bool gen_force = false;
    gen->add_option("--config", gen_config, "run config file");
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--domain", gen_domain, "source|target");
    gen->add_option("--scenes", gen_scenes, "number of scenes");
    gen->add_option("--out", gen_out, "output archive path")->required();
    gen->add_flag("--force", gen_force, "overwrite an existing file");

    // train
    auto* tr = app.add_subcommand("train", "train or fine-tune a model");
    TrainArgs ta;
    tr->add_option("--config", ta.config_path, "run config file");
    tr->add_option("--data", ta.data_path, "scene archive")->required();
    tr->add_option("--mode", ta.mode, "tuning mode")->required();
    tr->add_option("--pretrained", ta.pretrained, "source checkpoint");
    tr->add_option("--fraction", ta.fraction, "training-set fraction (0, 1]");
    tr->add_option("--epochs", ta.epochs, "override train.epochs");
    tr->add_option("--lr", ta.lr, "override train.lr");
    tr->add_option("--seed", ta.seed, "override model.seed");
    tr->add_option("--out", ta.out, "output checkpoint")->required();
    tr->add_option("--log", ta.log_path, "train log path (default: <out>.log)");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on an archive");
    std::string ev_ckpt, ev_data;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
    ev->add_option("--data", ev_data, "scene archive")->required();

    // count-params
    auto* cp = app.add_subcommand("count-params", "trainable-parameter accounting");
    std::string cp_config, cp_mode, cp_out;
    cp->add_option("--config", cp_config, "run config file");
    cp->add_option("--mode", cp_mode, "tuning mode")->required();
    cp->add_option("--out", cp_out, "machine-readable key=value output");

    // export-embeddings
    auto* ex = app.add_subcommand("export-embeddings", "set or pool embedding CSV export");
    std::string ex_ckpt, ex_data, ex_what, ex_out;
    ex->add_option("--ckpt", ex_ckpt, "checkpoint")->required();
    ex->add_option("--data", ex_data, "scene archive (required for --what sets)");
    ex->add_option("--what", ex_what, "sets|pools")->required();
    ex->add_option("--out", ex_out, "output CSV path")->required();

    // sweep
    auto* sw = app.add_subcommand("sweep", "train/eval across a hyperparameter range");
    SweepArgs sa;
    sw->add_option("--param", sa.param, "M|n_P|K|fraction")->required();
    sw->add_option("--values", sa.values_csv, "comma-separated values")->required();
    sw->add_option("--config", sa.config_path, "run config file");
    sw->add_option("--data", sa.data_path, "training archive")->required();
    sw->add_option("--eval-data", sa.eval_data_path, "evaluation archive (default: --data)");
    sw->add_option("--pretrained", sa.pretrained, "source checkpoint");
    sw->add_option("--mode", sa.mode, "tuning mode (default sop2)");
    sw->add_option("--epochs", sa.epochs, "override train.epochs");
    sw->add_option("--out", sa.out, "report path");

    // bench
    auto* be = app.add_subcommand("bench", "micro-benchmark forward passes");
    std::string be_config;
    int be_repeat = 5;
    std::uint64_t be_seed = 0;
    be->add_option("--config", be_config, "run config file");
    be->add_option("--repeat", be_repeat, "forward passes per variant");
    be->add_option("--seed", be_seed, "scene seed");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen_data(gen_config, gen_seed, gen_domain, gen_scenes,
                                               gen_out, gen_force);
        if (tr->parsed()) return cmd_train(ta);
        if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data);
        if (cp->parsed()) return cmd_count_params(cp_config, cp_mode, cp_out);
        if (ex->parsed()) return cmd_export_embeddings(ex_ckpt, ex_data, ex_what, ex_out);
        if (sw->parsed()) return cmd_sweep(sa);
        if (be->parsed()) return cmd_bench(be_config, be_repeat, be_seed);
        return kExitUsage;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
}

int run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.push_back("sop2");
    for (const std::string& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace sop2
