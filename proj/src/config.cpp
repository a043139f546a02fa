// SPDX-License-Identifier: Apache-2.0
#include "sop2/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace sop2 {

namespace {

std::string fmt_double(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(v[i]);
    }
    return s;
}

std::vector<int> split_ints(const std::string& s, const std::string& key) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': bad integer '" + item + "'");
        }
    }
    return out;
}

double parse_double(const std::string& s, const std::string& key) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': bad number '" + s + "'");
    }
}

int parse_int(const std::string& s, const std::string& key) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': bad integer '" + s + "'");
    }
}

bool parse_bool(const std::string& s, const std::string& key) {
    if (s == "true" || s == "on" || s == "1") return true;
    if (s == "false" || s == "off" || s == "0") return false;
    throw ConfigError("config key '" + key + "': bad boolean '" + s + "'");
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

void emit_domain(std::map<std::string, std::string>& kv, const std::string& prefix,
                 const DomainParams& d) {
    kv[prefix + ".density"] = fmt_double(d.density);
    kv[prefix + ".sensor_height"] = fmt_double(d.sensor_height);
    kv[prefix + ".intensity_bias"] = fmt_double(d.intensity_bias);
    kv[prefix + ".box_scale"] = fmt_double(d.box_scale);
    kv[prefix + ".class_mix"] = fmt_double(d.class_mix[0]) + "," + fmt_double(d.class_mix[1]) +
                                "," + fmt_double(d.class_mix[2]);
}

bool apply_domain(DomainParams& d, const std::string& prefix, const std::string& key,
                  const std::string& value) {
    if (key == prefix + ".density") {
        d.density = parse_double(value, key);
    } else if (key == prefix + ".sensor_height") {
        d.sensor_height = parse_double(value, key);
    } else if (key == prefix + ".intensity_bias") {
        d.intensity_bias = parse_double(value, key);
    } else if (key == prefix + ".box_scale") {
        d.box_scale = parse_double(value, key);
    } else if (key == prefix + ".class_mix") {
        std::stringstream ss(value);
        std::string item;
        int i = 0;
        while (std::getline(ss, item, ',') && i < 3) {
            d.class_mix[static_cast<std::size_t>(i++)] = parse_double(item, key);
        }
        if (i != 3) throw ConfigError("config key '" + key + "': need 3 probabilities");
    } else {
        return false;
    }
    return true;
}

}  // namespace

RunConfig::RunConfig() {
    // Target domain: the shifted counterpart of the source defaults.
    target.density = 1.5;
    target.sensor_height = 0.2;
    target.intensity_bias = 0.15;
    target.box_scale = 0.85;
    target.class_mix = {0.34, 0.33, 0.33};
}

std::string RunConfig::canonical() const {
    std::map<std::string, std::string> kv;
    kv["model.channels"] = std::to_string(model.channels);
    kv["model.blocks"] = std::to_string(model.blocks);
    kv["model.heads"] = std::to_string(model.heads);
    kv["model.set_capacity"] = std::to_string(model.set_capacity);
    kv["model.window_sizes"] = join_ints(model.window_sizes);
    kv["model.grid_dx"] = fmt_double(model.grid.dx);
    kv["model.grid_dy"] = fmt_double(model.grid.dy);
    kv["model.grid_dz"] = fmt_double(model.grid.dz);
    kv["model.extent_x"] = fmt_double(model.extent.x_max);
    kv["model.extent_y"] = fmt_double(model.extent.y_max);
    kv["model.extent_z"] = fmt_double(model.extent.z_max);
    kv["model.max_points_per_voxel"] = std::to_string(model.max_points_per_voxel);
    kv["model.vfe_layers"] = std::to_string(model.vfe_layers);
    kv["model.mlp_hidden_ratio"] = std::to_string(model.mlp_hidden_ratio);
    kv["model.head_hidden"] = std::to_string(model.head_hidden);
    kv["model.prompt_mode"] = to_string(model.prompt_mode);
    kv["model.prompt_partitions"] =
        model.prompt_partitions.empty() ? "all" : join_ints(model.prompt_partitions);
    kv["model.n_t"] = std::to_string(model.n_t);
    kv["model.n_g"] = std::to_string(model.n_g);
    kv["model.gen_layers"] = std::to_string(model.gen_layers);
    kv["model.pool_m"] = std::to_string(model.pool_m);
    kv["model.pool_n_p"] = std::to_string(model.pool_n_p);
    kv["model.pool_k"] = std::to_string(model.pool_k);
    kv["model.lambda_key"] = fmt_double(model.lambda_key);
    kv["model.key_pull"] = model.key_pull ? "true" : "false";
    kv["model.lora_rank"] = std::to_string(model.lora_rank);
    kv["model.lora_alpha"] = fmt_double(model.lora_alpha);
    kv["model.layer_norm_eps"] = fmt_double(model.layer_norm_eps);
    kv["model.cosine_eps"] = fmt_double(model.cosine_eps);
    kv["model.seed"] = std::to_string(model.seed);
    emit_domain(kv, "source", source);
    emit_domain(kv, "target", target);
    kv["train.lr"] = fmt_double(train.lr);
    kv["train.epochs"] = std::to_string(train.epochs);
    kv["train.warmup_frac"] = fmt_double(train.warmup_frac);
    kv["train.fraction"] = fmt_double(train.fraction);
    kv["train.mode"] = train.mode;

    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

std::string RunConfig::backbone_signature() const {
    std::map<std::string, std::string> kv;
    kv["model.channels"] = std::to_string(model.channels);
    kv["model.blocks"] = std::to_string(model.blocks);
    kv["model.heads"] = std::to_string(model.heads);
    kv["model.set_capacity"] = std::to_string(model.set_capacity);
    kv["model.window_sizes"] = join_ints(model.window_sizes);
    kv["model.grid_dx"] = fmt_double(model.grid.dx);
    kv["model.grid_dy"] = fmt_double(model.grid.dy);
    kv["model.grid_dz"] = fmt_double(model.grid.dz);
    kv["model.extent_x"] = fmt_double(model.extent.x_max);
    kv["model.extent_y"] = fmt_double(model.extent.y_max);
    kv["model.extent_z"] = fmt_double(model.extent.z_max);
    kv["model.max_points_per_voxel"] = std::to_string(model.max_points_per_voxel);
    kv["model.vfe_layers"] = std::to_string(model.vfe_layers);
    kv["model.mlp_hidden_ratio"] = std::to_string(model.mlp_hidden_ratio);
    kv["model.head_hidden"] = std::to_string(model.head_hidden);
    kv["model.layer_norm_eps"] = fmt_double(model.layer_norm_eps);
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

RunConfig RunConfig::parse_text(const std::string& text) {
    RunConfig rc;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));

        ModelConfig& m = rc.model;
        if (key == "model.channels") m.channels = parse_int(value, key);
        else if (key == "model.blocks") m.blocks = parse_int(value, key);
        else if (key == "model.heads") m.heads = parse_int(value, key);
        else if (key == "model.set_capacity") m.set_capacity = parse_int(value, key);
        else if (key == "model.window_sizes") m.window_sizes = split_ints(value, key);
        else if (key == "model.grid_dx") m.grid.dx = parse_double(value, key);
        else if (key == "model.grid_dy") m.grid.dy = parse_double(value, key);
        else if (key == "model.grid_dz") m.grid.dz = parse_double(value, key);
        else if (key == "model.extent_x") m.extent.x_max = parse_double(value, key);
        else if (key == "model.extent_y") m.extent.y_max = parse_double(value, key);
        else if (key == "model.extent_z") m.extent.z_max = parse_double(value, key);
        else if (key == "model.max_points_per_voxel") m.max_points_per_voxel = parse_int(value, key);
        else if (key == "model.vfe_layers") m.vfe_layers = parse_int(value, key);
        else if (key == "model.mlp_hidden_ratio") m.mlp_hidden_ratio = parse_int(value, key);
        else if (key == "model.head_hidden") m.head_hidden = parse_int(value, key);
        else if (key == "model.prompt_mode") m.prompt_mode = prompt_mode_from_string(value);
        else if (key == "model.prompt_partitions") {
            m.prompt_partitions = value == "all" ? std::vector<int>{} : split_ints(value, key);
        }
        else if (key == "model.n_t") m.n_t = parse_int(value, key);
        else if (key == "model.n_g") m.n_g = parse_int(value, key);
        else if (key == "model.gen_layers") m.gen_layers = parse_int(value, key);
        else if (key == "model.pool_m") m.pool_m = parse_int(value, key);
        else if (key == "model.pool_n_p") m.pool_n_p = parse_int(value, key);
        else if (key == "model.pool_k") m.pool_k = parse_int(value, key);
        else if (key == "model.lambda_key") m.lambda_key = parse_double(value, key);
        else if (key == "model.key_pull") m.key_pull = parse_bool(value, key);
        else if (key == "model.lora_rank") m.lora_rank = parse_int(value, key);
        else if (key == "model.lora_alpha") m.lora_alpha = parse_double(value, key);
        else if (key == "model.layer_norm_eps") m.layer_norm_eps = parse_double(value, key);
        else if (key == "model.cosine_eps") m.cosine_eps = parse_double(value, key);
        else if (key == "model.seed") m.seed = static_cast<std::uint64_t>(std::stoull(value));
        else if (apply_domain(rc.source, "source", key, value)) {}
        else if (apply_domain(rc.target, "target", key, value)) {}
        else if (key == "train.lr") rc.train.lr = parse_double(value, key);
        else if (key == "train.epochs") rc.train.epochs = parse_int(value, key);
        else if (key == "train.warmup_frac") rc.train.warmup_frac = parse_double(value, key);
        else if (key == "train.fraction") rc.train.fraction = parse_double(value, key);
        else if (key == "train.mode") rc.train.mode = value;
        else throw ConfigError("unknown config key '" + key + "'");
    }
    return rc;
}

RunConfig RunConfig::parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_text(ss.str());
}

}  // namespace sop2
