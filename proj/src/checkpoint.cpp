#include "canvit/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "canvit/io.hpp"

namespace canvit {

namespace {

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
void put_i64(std::ostream& out, std::int64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t get_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
std::uint64_t get_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
std::int64_t get_i64(std::istream& in) {
    std::int64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void put_str(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_str(std::istream& in, const std::string& path) {
    const std::uint32_t len = get_u32(in);
    if (!in || len > (1u << 24)) throw std::runtime_error(path + ": corrupt string field");
    std::string s(len, '\0');
    in.read(s.data(), len);
    if (!in) throw std::runtime_error(path + ": truncated string field");
    return s;
}

}  // namespace

void save_checkpoint(const CheckpointData& ck, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out.write("CVIT", 4);
    put_u32(out, kCheckpointVersion);
    put_u64(out, ck.config.size());
    for (const auto& [k, v] : ck.config) {
        put_str(out, k);
        put_str(out, v);
    }
    put_u64(out, ck.tensors.size());
    for (const auto& [name, t] : ck.tensors) {
        put_str(out, name);
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (int d = 0; d < t.rank(); ++d) put_i64(out, t.dim(d));
        out.put(0);  // dtype tag: f64
        out.write(reinterpret_cast<const char*>(t.value().data()),
                  static_cast<std::streamsize>(t.value().size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error(path + ": write failed");
}

CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "CVIT", 4) != 0)
        throw std::runtime_error(path + ": not a checkpoint (bad magic)");
    const std::uint32_t version = get_u32(in);
    if (version != kCheckpointVersion)
        throw std::runtime_error(path + ": unsupported checkpoint version " +
                                 std::to_string(version));
    CheckpointData ck;
    const std::uint64_t n_cfg = get_u64(in);
    if (!in || n_cfg > (1u << 20)) throw std::runtime_error(path + ": corrupt config block");
    for (std::uint64_t i = 0; i < n_cfg; ++i) {
        std::string k = get_str(in, path);
        std::string v = get_str(in, path);
        ck.config.emplace_back(std::move(k), std::move(v));
    }
    const std::uint64_t n_t = get_u64(in);
    if (!in || n_t > (1u << 20)) throw std::runtime_error(path + ": corrupt tensor directory");
    for (std::uint64_t i = 0; i < n_t; ++i) {
        std::string name = get_str(in, path);
        const std::uint32_t ndim = get_u32(in);
        if (!in || ndim > 8) throw std::runtime_error(path + ": corrupt tensor rank");
        Shape shape;
        for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(get_i64(in));
        const int dtype = in.get();
        if (dtype != 0) throw std::runtime_error(path + ": unsupported dtype tag");
        const std::int64_t n = shape_numel(shape);
        std::vector<double> data(static_cast<std::size_t>(n));
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!in) throw std::runtime_error(path + ": truncated tensor payload for '" + name + "'");
        ck.tensors.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
    }
    return ck;
}

std::vector<std::pair<std::string, std::string>> model_config_to_kv(const ModelConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> kv;
    auto add_i = [&kv](const char* k, std::int64_t v) { kv.emplace_back(k, std::to_string(v)); };
    auto add_d = [&kv](const char* k, double v) { kv.emplace_back(k, format_double(v)); };
    auto add_b = [&kv](const char* k, bool v) { kv.emplace_back(k, v ? "true" : "false"); };
    add_i("model.d_bb", cfg.d_bb);
    add_i("model.d_can", cfg.d_can);
    add_i("model.depth", cfg.depth);
    add_i("model.heads_bb", cfg.heads_bb);
    add_i("model.ca_heads", cfg.ca_heads);
    add_i("model.registers_bb", cfg.registers_bb);
    add_i("model.registers_can", cfg.registers_can);
    add_i("model.rw_stride", cfg.rw_stride);
    add_d("model.rope_base", cfg.rope_base);
    add_i("model.patch_px", cfg.patch_px);
    add_i("model.glimpse_px", cfg.glimpse_px);
    add_d("model.rff_sigma", cfg.rff_sigma);
    add_d("model.layerscale_init", cfg.layerscale_init);
    add_i("model.d_teacher", cfg.d_teacher);
    add_i("model.canvas_h", cfg.canvas_h);
    add_i("model.canvas_w", cfg.canvas_w);
    add_b("model.vpe_enabled", cfg.vpe_enabled);
    add_b("model.reads_enabled", cfg.reads_enabled);
    add_b("model.canvas_qkvo", cfg.canvas_qkvo);
    return kv;
}

namespace {

bool apply_model_key(const std::string& key, const std::string& val, ModelConfig& m) {
    if (key == "model.d_bb") m.d_bb = kv_int(key, val);
    else if (key == "model.d_can") m.d_can = kv_int(key, val);
    else if (key == "model.depth") m.depth = kv_int(key, val);
    else if (key == "model.heads_bb") m.heads_bb = kv_int(key, val);
    else if (key == "model.ca_heads") m.ca_heads = kv_int(key, val);
    else if (key == "model.registers_bb") m.registers_bb = kv_int(key, val);
    else if (key == "model.registers_can") m.registers_can = kv_int(key, val);
    else if (key == "model.rw_stride") m.rw_stride = kv_int(key, val);
    else if (key == "model.rope_base") m.rope_base = kv_double(key, val);
    else if (key == "model.patch_px") m.patch_px = kv_int(key, val);
    else if (key == "model.glimpse_px") m.glimpse_px = kv_int(key, val);
    else if (key == "model.rff_sigma") m.rff_sigma = kv_double(key, val);
    else if (key == "model.layerscale_init") m.layerscale_init = kv_double(key, val);
    else if (key == "model.d_teacher") m.d_teacher = kv_int(key, val);
    else if (key == "model.canvas_h") m.canvas_h = kv_int(key, val);
    else if (key == "model.canvas_w") m.canvas_w = kv_int(key, val);
    else if (key == "model.vpe_enabled") m.vpe_enabled = kv_bool(key, val);
    else if (key == "model.reads_enabled") m.reads_enabled = kv_bool(key, val);
    else if (key == "model.canvas_qkvo") m.canvas_qkvo = kv_bool(key, val);
    else return false;
    return true;
}

bool apply_train_key(const std::string& key, const std::string& val, TrainConfig& t) {
    if (key == "train.k") t.k = kv_int(key, val);
    else if (key == "train.p_stop") t.p_stop = kv_double(key, val);
    else if (key == "train.batch") t.batch = kv_int(key, val);
    else if (key == "train.steps") t.steps = kv_int(key, val);
    else if (key == "train.lr") t.lr = kv_double(key, val);
    else if (key == "train.warmup_frac") t.warmup_frac = kv_double(key, val);
    else if (key == "train.weight_decay") t.weight_decay = kv_double(key, val);
    else if (key == "train.clip_norm") t.clip_norm = kv_double(key, val);
    else if (key == "train.beta1") t.beta1 = kv_double(key, val);
    else if (key == "train.beta2") t.beta2 = kv_double(key, val);
    else if (key == "train.seed") t.seed = kv_u64(key, val);
    else if (key == "train.holdout") t.holdout = kv_int(key, val);
    else if (key == "train.eval_t") t.eval_t = kv_int(key, val);
    else if (key == "train.no_fiid") t.no_fiid = kv_bool(key, val);
    else if (key == "train.second_riid") t.second_riid = kv_bool(key, val);
    else if (key == "train.no_dense_loss") t.no_dense_loss = kv_bool(key, val);
    else return false;
    return true;
}

}  // namespace

void apply_config(const std::vector<std::pair<std::string, std::string>>& kv, RunConfig& cfg) {
    for (const auto& [key, val] : kv) {
        if (apply_model_key(key, val, cfg.model)) continue;
        if (apply_train_key(key, val, cfg.train)) continue;
        if (key == "teacher.seed") {
            cfg.teacher_seed = kv_u64(key, val);
            continue;
        }
        throw std::runtime_error("config: unknown key '" + key +
                                 "' (see README for the documented schema)");
    }
}

void save_model(const ModelBundle& b, const std::string& path) {
    CheckpointData ck;
    ck.config = model_config_to_kv(b.params.cfg);
    if (b.has_teacher) {
        ck.config.emplace_back("teacher.seed", std::to_string(b.teacher.seed));
        ck.config.emplace_back("teacher.grid_h", std::to_string(b.teacher.grid_h));
        ck.config.emplace_back("teacher.grid_w", std::to_string(b.teacher.grid_w));
        ck.config.emplace_back("teacher.d_out", std::to_string(b.teacher.d_out));
        ck.config.emplace_back("teacher.hidden", std::to_string(b.teacher.hidden));
    }
    ck.tensors = b.params.named;
    if (b.has_teacher) {
        ck.tensors.emplace_back("stats.patch_mean", b.stats.patch_mean);
        ck.tensors.emplace_back("stats.patch_var", b.stats.patch_var);
        ck.tensors.emplace_back("stats.cls_mean", b.stats.cls_mean);
        ck.tensors.emplace_back("stats.cls_var", b.stats.cls_var);
    }
    save_checkpoint(ck, path);
}

ModelBundle load_model(const std::string& path) {
    CheckpointData ck = load_checkpoint(path);
    RunConfig rc;
    std::vector<std::pair<std::string, std::string>> model_kv, teacher_kv;
    for (const auto& e : ck.config)
        (e.first.rfind("teacher.", 0) == 0 ? teacher_kv : model_kv).push_back(e);
    apply_config(model_kv, rc);

    ModelBundle b;
    b.params = make_model(rc.model, 0);

    std::vector<std::pair<std::string, Tensor>> extras;
    std::size_t filled = 0;
    for (const auto& [name, t] : ck.tensors) {
        bool matched = false;
        for (auto& [pname, pt] : b.params.named) {
            if (pname != name) continue;
            if (pt.shape() != t.shape())
                throw std::runtime_error(path + ": tensor '" + name + "' has shape " +
                                         shape_str(t.shape()) + ", model expects " +
                                         shape_str(pt.shape()));
            std::copy(t.value().begin(), t.value().end(), pt.raw_value().begin());
            matched = true;
            ++filled;
            break;
        }
        if (!matched) extras.emplace_back(name, t);
    }
    if (filled != b.params.named.size())
        throw std::runtime_error(path + ": checkpoint is missing model tensors (" +
                                 std::to_string(filled) + "/" +
                                 std::to_string(b.params.named.size()) + " filled)");
    // frozen lift frequencies live both as a named tensor and as plain data
    for (const auto& [name, t] : b.params.named)
        if (name == "rff.freq") {
            b.params.rff.n_features = t.dim(0);
            b.params.rff.freq.assign(t.value().begin(), t.value().end());
        }

    if (!teacher_kv.empty()) {
        std::uint64_t seed = 0;
        std::int64_t gh = 0, gw = 0, dout = 0, hidden = 16;
        for (const auto& [k, v] : teacher_kv) {
            if (k == "teacher.seed") seed = kv_u64(k, v);
            else if (k == "teacher.grid_h") gh = kv_int(k, v);
            else if (k == "teacher.grid_w") gw = kv_int(k, v);
            else if (k == "teacher.d_out") dout = kv_int(k, v);
            else if (k == "teacher.hidden") hidden = kv_int(k, v);
            else throw std::runtime_error(path + ": unknown teacher key '" + k + "'");
        }
        b.teacher = make_teacher(gh, gw, dout, seed);
        if (b.teacher.hidden != hidden)
            throw std::runtime_error(path + ": teacher hidden-width mismatch");
        StandardizationStats st;
        for (const auto& [name, t] : extras) {
            if (name == "stats.patch_mean") st.patch_mean = t;
            else if (name == "stats.patch_var") st.patch_var = t;
            else if (name == "stats.cls_mean") st.cls_mean = t;
            else if (name == "stats.cls_var") st.cls_var = t;
            else throw std::runtime_error(path + ": unexpected tensor '" + name + "'");
        }
        if (!st.patch_mean.defined() || !st.patch_var.defined() || !st.cls_mean.defined() ||
            !st.cls_var.defined())
            throw std::runtime_error(path + ": teacher present but standardization stats missing");
        b.stats = st;
        b.has_teacher = true;
    } else if (!extras.empty()) {
        throw std::runtime_error(path + ": unexpected tensor '" + extras.front().first + "'");
    }
    return b;
}

}  // namespace canvit
