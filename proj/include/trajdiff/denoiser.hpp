#pragma once

// Conditional noise predictor eps_theta(x_k, k, y): a 1-D U-Net over the
// trajectory axis. Controls map to channels; the scalar duration rides along
// as an extra channel broadcast across timesteps. Sinusoidal step embedding
// and an MLP-encoded condition (or a learned null embedding) are added per
// stage. Two stride-2 downsampling stages, kernel size 3, group norm, SiLU.

#include <filesystem>
#include <string>
#include <vector>

#include "trajdiff/common.hpp"
#include "trajdiff/io.hpp"
#include "trajdiff/nn.hpp"
#include "trajdiff/problems.hpp"

namespace trajdiff {

constexpr int kCheckpointFormatVersion = 1;

struct DenoiserConfig {
  int traj_steps = 0;     // T
  int traj_channels = 0;  // controls per step
  int condition_dim = 0;  // k_y
  std::array<int, 3> hidden_widths{512, 512, 1024};
  std::array<int, 2> cond_widths{256, 512};
  int time_embed_dim = 128;
  bool desk_scale = false;

  int input_dim() const { return 1 + traj_steps * traj_channels; }

  static DenoiserConfig for_task(const Task& task, bool desk) {
    DenoiserConfig c;
    c.traj_steps = task.timesteps;
    c.traj_channels = task.controls_per_step();
    c.condition_dim = task.condition_dim();
    c.desk_scale = desk;
    if (desk) {
      c.hidden_widths = {64, 64, 128};
      c.cond_widths = {32, 64};
      c.time_embed_dim = 32;
    }
    return c;
  }

  void validate() const {
    require(traj_steps >= 1 && traj_channels >= 1 && condition_dim >= 1,
            Errc::invalid_argument, "denoiser dims");
    for (int w : hidden_widths)
      require(w >= 1, Errc::invalid_argument, "hidden widths");
    for (int w : cond_widths)
      require(w >= 1, Errc::invalid_argument, "cond widths");
    require(time_embed_dim >= 2 && time_embed_dim % 2 == 0,
            Errc::invalid_argument, "time_embed_dim must be even");
  }

  json to_json() const {
    return json{{"traj_steps", traj_steps},
                {"traj_channels", traj_channels},
                {"condition_dim", condition_dim},
                {"hidden_widths", hidden_widths},
                {"cond_widths", cond_widths},
                {"time_embed_dim", time_embed_dim},
                {"desk_scale", desk_scale}};
  }

  static DenoiserConfig from_json(const json& j) {
    DenoiserConfig c;
    c.traj_steps = j.at("traj_steps");
    c.traj_channels = j.at("traj_channels");
    c.condition_dim = j.at("condition_dim");
    for (int i = 0; i < 3; ++i) c.hidden_widths[i] = j.at("hidden_widths")[i];
    for (int i = 0; i < 2; ++i) c.cond_widths[i] = j.at("cond_widths")[i];
    c.time_embed_dim = j.at("time_embed_dim");
    c.desk_scale = j.at("desk_scale");
    return c;
  }

  bool operator==(const DenoiserConfig&) const = default;
};

enum class ParamInit { Weight, Bias, Gamma, NullEmbed };

struct ParamBlockInfo {
  std::string name;
  long rows = 0;
  long cols = 0;
  long offset = 0;
  ParamInit init = ParamInit::Weight;
};

struct DenoiserCache {
  struct BlockCache {
    nn::ConvCache conv1, conv2;
    nn::GroupNormCache gn1, gn2;
    Mat silu1_in, silu2_in;
    nn::DenseCache embp;
  };
  Vec pe;
  nn::DenseCache time_fc1, time_fc2;
  Vec time_silu_in;
  bool has_cond = false;
  nn::DenseCache cond_fc1, cond_fc2, cond_fc3;
  Vec cond_silu1_in, cond_silu2_in;
  Vec emb;
  BlockCache enc1, enc2, mid, dec1, dec2;
  nn::ConvCache down1, down2, up1, up2, out;
  int len_full = 0, len_half = 0, len_quarter = 0;
};

class Denoiser {
 public:
  explicit Denoiser(DenoiserConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    build_registry();
    params_ = Vec::Zero(total_);
  }

  // Deterministic fan-in-scaled initialization; values are rounded to the
  // float32 grid so checkpoints round-trip bit-exactly.
  static Denoiser init(const DenoiserConfig& cfg, std::uint64_t seed) {
    Denoiser d(cfg);
    Rng rng(seed);
    for (const ParamBlockInfo& b : d.blocks_) {
      auto seg = d.params_.segment(b.offset, b.rows * b.cols);
      switch (b.init) {
        case ParamInit::Weight: {
          const double a = 1.0 / std::sqrt(static_cast<double>(b.cols));
          for (Eigen::Index i = 0; i < seg.size(); ++i)
            seg[i] = rng.uniform(-a, a);
          break;
        }
        case ParamInit::Bias:
          seg.setZero();
          break;
        case ParamInit::Gamma:
          seg.setOnes();
          break;
        case ParamInit::NullEmbed: {
          const double a = 1.0 / std::sqrt(static_cast<double>(b.rows));
          for (Eigen::Index i = 0; i < seg.size(); ++i)
            seg[i] = rng.uniform(-a, a);
          break;
        }
      }
    }
    d.params_ = round_to_f32(d.params_);
    return d;
  }

  const DenoiserConfig& config() const { return cfg_; }
  int input_dim() const { return cfg_.input_dim(); }
  long param_count() const { return total_; }
  const std::vector<ParamBlockInfo>& blocks() const { return blocks_; }
  Vec& params() { return params_; }
  const Vec& params() const { return params_; }

  Vec forward(const Vec& x, int k, const Vec* y, DenoiserCache& c) const {
    require(x.size() == cfg_.input_dim(), Errc::shape_mismatch,
            "denoiser input");
    require(y == nullptr || y->size() == cfg_.condition_dim,
            Errc::shape_mismatch, "denoiser condition");
    const int T = cfg_.traj_steps;
    const int C = cfg_.traj_channels;
    const int E = cfg_.time_embed_dim;

    // step + condition embedding
    c.pe = nn::sinusoidal_embedding(k, E);
    const Vec t1 = nn::dense_forward(Wm(h_.time_fc1.w), Vm(h_.time_fc1.b),
                                     c.pe, c.time_fc1);
    c.time_silu_in = t1;
    const Vec temb = nn::dense_forward(Wm(h_.time_fc2.w), Vm(h_.time_fc2.b),
                                       nn::silu(t1), c.time_fc2);
    Vec cemb;
    c.has_cond = y != nullptr;
    if (y != nullptr) {
      const Vec c1 = nn::dense_forward(Wm(h_.cond_fc1.w), Vm(h_.cond_fc1.b),
                                       *y, c.cond_fc1);
      c.cond_silu1_in = c1;
      const Vec c2 = nn::dense_forward(Wm(h_.cond_fc2.w), Vm(h_.cond_fc2.b),
                                       nn::silu(c1), c.cond_fc2);
      c.cond_silu2_in = c2;
      cemb = nn::dense_forward(Wm(h_.cond_fc3.w), Vm(h_.cond_fc3.b),
                               nn::silu(c2), c.cond_fc3);
    } else {
      cemb = Vm(h_.null_emb);
    }
    c.emb = temb + cemb;

    // controls as channels, duration broadcast as the last channel
    Mat u0(C + 1, T);
    for (int s = 0; s < T; ++s)
      for (int ch = 0; ch < C; ++ch) u0(ch, s) = x[1 + s * C + ch];
    u0.row(C).setConstant(x[0]);

    const Mat e1 = block_forward(h_.enc1, u0, c.emb, c.enc1);
    const Mat d1 =
        nn::conv1d_forward(Wm(h_.down1.w), Vm(h_.down1.b), e1, 2, c.down1);
    const Mat e2 = block_forward(h_.enc2, d1, c.emb, c.enc2);
    const Mat d2 =
        nn::conv1d_forward(Wm(h_.down2.w), Vm(h_.down2.b), e2, 2, c.down2);
    const Mat mid = block_forward(h_.mid, d2, c.emb, c.mid);
    c.len_full = T;
    c.len_half = static_cast<int>(d1.cols());
    c.len_quarter = static_cast<int>(d2.cols());

    const Mat uu1 = nn::upsample_forward(mid, c.len_half);
    const Mat u1c =
        nn::conv1d_forward(Wm(h_.up1.w), Vm(h_.up1.b), uu1, 1, c.up1);
    Mat cat1(u1c.rows() + e2.rows(), c.len_half);
    cat1 << u1c, e2;
    const Mat dec1 = block_forward(h_.dec1, cat1, c.emb, c.dec1);

    const Mat uu2 = nn::upsample_forward(dec1, T);
    const Mat u2c =
        nn::conv1d_forward(Wm(h_.up2.w), Vm(h_.up2.b), uu2, 1, c.up2);
    Mat cat2(u2c.rows() + e1.rows(), T);
    cat2 << u2c, e1;
    const Mat dec2 = block_forward(h_.dec2, cat2, c.emb, c.dec2);

    const Mat out =
        nn::conv1d_forward(Wm(h_.out.w), Vm(h_.out.b), dec2, 1, c.out);
    Vec eps(cfg_.input_dim());
    eps[0] = out.row(C).mean();
    for (int s = 0; s < T; ++s)
      for (int ch = 0; ch < C; ++ch) eps[1 + s * C + ch] = out(ch, s);
    return eps;
  }

  // Accumulates d loss / d params into grad (same layout as params()).
  // x_k is treated as data; its gradient is not produced.
  void backward(const DenoiserCache& c, const Vec& d_eps, Vec& grad) const {
    require(grad.size() == total_, Errc::shape_mismatch, "grad buffer");
    const int T = cfg_.traj_steps;
    const int C = cfg_.traj_channels;
    Mat dout(C + 1, T);
    for (int s = 0; s < T; ++s)
      for (int ch = 0; ch < C; ++ch) dout(ch, s) = d_eps[1 + s * C + ch];
    dout.row(C).setConstant(d_eps[0] / T);

    Vec demb = Vec::Zero(cfg_.time_embed_dim);
    const Mat ddec2 = nn::conv1d_backward(Wm(h_.out.w), gW(grad, h_.out.w),
                                          gV(grad, h_.out.b), c.out, dout);
    const Mat dcat2 = block_backward(h_.dec2, c.dec2, ddec2, grad, demb);
    const int w0 = cfg_.hidden_widths[0];
    const int w1 = cfg_.hidden_widths[1];
    const Mat du2c = dcat2.topRows(w0);
    Mat de1 = dcat2.bottomRows(w0);  // skip branch
    const Mat duu2 = nn::conv1d_backward(Wm(h_.up2.w), gW(grad, h_.up2.w),
                                         gV(grad, h_.up2.b), c.up2, du2c);
    const Mat ddec1 = nn::upsample_backward(duu2, c.len_half);
    const Mat dcat1 = block_backward(h_.dec1, c.dec1, ddec1, grad, demb);
    const Mat du1c = dcat1.topRows(w1);
    Mat de2 = dcat1.bottomRows(w1);  // skip branch
    const Mat duu1 = nn::conv1d_backward(Wm(h_.up1.w), gW(grad, h_.up1.w),
                                         gV(grad, h_.up1.b), c.up1, du1c);
    const Mat dmid = nn::upsample_backward(duu1, c.len_quarter);
    const Mat dd2 = block_backward(h_.mid, c.mid, dmid, grad, demb);
    de2 += nn::conv1d_backward(Wm(h_.down2.w), gW(grad, h_.down2.w),
                               gV(grad, h_.down2.b), c.down2, dd2);
    const Mat dd1 = block_backward(h_.enc2, c.enc2, de2, grad, demb);
    de1 += nn::conv1d_backward(Wm(h_.down1.w), gW(grad, h_.down1.w),
                               gV(grad, h_.down1.b), c.down1, dd1);
    block_backward(h_.enc1, c.enc1, de1, grad, demb);

    if (c.has_cond) {
      const Vec dc3 =
          nn::dense_backward(Wm(h_.cond_fc3.w), gW(grad, h_.cond_fc3.w),
                             gV(grad, h_.cond_fc3.b), c.cond_fc3, demb);
      const Vec dc2 = nn::silu_grad_times(c.cond_silu2_in, dc3);
      const Vec dc1s =
          nn::dense_backward(Wm(h_.cond_fc2.w), gW(grad, h_.cond_fc2.w),
                             gV(grad, h_.cond_fc2.b), c.cond_fc2, dc2);
      const Vec dc1 = nn::silu_grad_times(c.cond_silu1_in, dc1s);
      nn::dense_backward(Wm(h_.cond_fc1.w), gW(grad, h_.cond_fc1.w),
                         gV(grad, h_.cond_fc1.b), c.cond_fc1, dc1);
    } else {
      grad.segment(blocks_[h_.null_emb].offset, cfg_.time_embed_dim) += demb;
    }
    const Vec dt2 =
        nn::dense_backward(Wm(h_.time_fc2.w), gW(grad, h_.time_fc2.w),
                           gV(grad, h_.time_fc2.b), c.time_fc2, demb);
    const Vec dt1 = nn::silu_grad_times(c.time_silu_in, dt2);
    nn::dense_backward(Wm(h_.time_fc1.w), gW(grad, h_.time_fc1.w),
                       gV(grad, h_.time_fc1.b), c.time_fc1, dt1);
  }

  Vec predict(const Vec& x, int k, const Vec* y) const {
    DenoiserCache cache;
    return forward(x, k, y, cache);
  }

 private:
  struct DenseH {
    int w = -1, b = -1;
  };
  struct ConvH {
    int w = -1, b = -1;
  };
  struct GnH {
    int g = -1, b = -1;
  };
  struct BlockH {
    ConvH conv1, conv2;
    GnH gn1, gn2;
    DenseH emb;
  };
  struct Handles {
    DenseH time_fc1, time_fc2;
    DenseH cond_fc1, cond_fc2, cond_fc3;
    int null_emb = -1;
    BlockH enc1, enc2, mid, dec1, dec2;
    ConvH down1, down2, up1, up2, out;
  };

  nn::CMapM Wm(int idx) const {
    const auto& b = blocks_[idx];
    return nn::CMapM(params_.data() + b.offset, b.rows, b.cols);
  }
  nn::CMapV Vm(int idx) const {
    const auto& b = blocks_[idx];
    return nn::CMapV(params_.data() + b.offset, b.rows);
  }
  nn::MapM gW(Vec& g, int idx) const {
    const auto& b = blocks_[idx];
    return nn::MapM(g.data() + b.offset, b.rows, b.cols);
  }
  nn::MapV gV(Vec& g, int idx) const {
    const auto& b = blocks_[idx];
    return nn::MapV(g.data() + b.offset, b.rows);
  }

  Mat block_forward(const BlockH& p, const Mat& in, const Vec& emb,
                    DenoiserCache::BlockCache& c) const {
    const Mat a =
        nn::conv1d_forward(Wm(p.conv1.w), Vm(p.conv1.b), in, 1, c.conv1);
    const Mat b = nn::group_norm_forward(Vm(p.gn1.g), Vm(p.gn1.b), a, c.gn1);
    c.silu1_in = b;
    Mat d = nn::silu(b);
    const Vec e = nn::dense_forward(Wm(p.emb.w), Vm(p.emb.b), emb, c.embp);
    d.colwise() += e;
    const Mat f =
        nn::conv1d_forward(Wm(p.conv2.w), Vm(p.conv2.b), d, 1, c.conv2);
    const Mat g = nn::group_norm_forward(Vm(p.gn2.g), Vm(p.gn2.b), f, c.gn2);
    c.silu2_in = g;
    return nn::silu(g);
  }

  Mat block_backward(const BlockH& p, const DenoiserCache::BlockCache& c,
                     const Mat& dout, Vec& grad, Vec& demb) const {
    const Mat dg = nn::silu_grad_times(c.silu2_in, dout);
    const Mat df = nn::group_norm_backward(Vm(p.gn2.g), gV(grad, p.gn2.g),
                                           gV(grad, p.gn2.b), c.gn2, dg);
    const Mat dd = nn::conv1d_backward(Wm(p.conv2.w), gW(grad, p.conv2.w),
                                       gV(grad, p.conv2.b), c.conv2, df);
    demb += nn::dense_backward(Wm(p.emb.w), gW(grad, p.emb.w),
                               gV(grad, p.emb.b), c.embp, dd.rowwise().sum());
    const Mat dc = nn::silu_grad_times(c.silu1_in, dd);
    const Mat da = nn::group_norm_backward(Vm(p.gn1.g), gV(grad, p.gn1.g),
                                           gV(grad, p.gn1.b), c.gn1, dc);
    return nn::conv1d_backward(Wm(p.conv1.w), gW(grad, p.conv1.w),
                               gV(grad, p.conv1.b), c.conv1, da);
  }

  int add_block(const std::string& name, long rows, long cols, ParamInit init) {
    blocks_.push_back({name, rows, cols, total_, init});
    total_ += rows * cols;
    return static_cast<int>(blocks_.size()) - 1;
  }

  DenseH add_dense(const std::string& name, long out, long in) {
    return {add_block(name + ".w", out, in, ParamInit::Weight),
            add_block(name + ".b", out, 1, ParamInit::Bias)};
  }
  ConvH add_conv(const std::string& name, long c_out, long c_in) {
    return {add_block(name + ".w", c_out, 3 * c_in, ParamInit::Weight),
            add_block(name + ".b", c_out, 1, ParamInit::Bias)};
  }
  GnH add_gn(const std::string& name, long channels) {
    return {add_block(name + ".g", channels, 1, ParamInit::Gamma),
            add_block(name + ".b", channels, 1, ParamInit::Bias)};
  }
  BlockH add_resblock(const std::string& name, long c_in, long c_out) {
    BlockH b;
    b.conv1 = add_conv(name + ".conv1", c_out, c_in);
    b.gn1 = add_gn(name + ".gn1", c_out);
    b.emb = add_dense(name + ".emb", c_out, cfg_.time_embed_dim);
    b.conv2 = add_conv(name + ".conv2", c_out, c_out);
    b.gn2 = add_gn(name + ".gn2", c_out);
    return b;
  }

  void build_registry() {
    const int E = cfg_.time_embed_dim;
    const int C = cfg_.traj_channels;
    const auto [w0, w1, w2] = cfg_.hidden_widths;
    h_.time_fc1 = add_dense("time.fc1", E, E);
    h_.time_fc2 = add_dense("time.fc2", E, E);
    h_.cond_fc1 = add_dense("cond.fc1", cfg_.cond_widths[0], cfg_.condition_dim);
    h_.cond_fc2 = add_dense("cond.fc2", cfg_.cond_widths[1], cfg_.cond_widths[0]);
    h_.cond_fc3 = add_dense("cond.fc3", E, cfg_.cond_widths[1]);
    h_.null_emb = add_block("cond.null", E, 1, ParamInit::NullEmbed);
    h_.enc1 = add_resblock("enc1", C + 1, w0);
    h_.down1 = add_conv("down1", w0, w0);
    h_.enc2 = add_resblock("enc2", w0, w1);
    h_.down2 = add_conv("down2", w1, w1);
    h_.mid = add_resblock("mid", w1, w2);
    h_.up1 = add_conv("up1", w1, w2);
    h_.dec1 = add_resblock("dec1", 2 * w1, w1);
    h_.up2 = add_conv("up2", w0, w1);
    h_.dec2 = add_resblock("dec2", 2 * w0, w0);
    h_.out = add_conv("out", C + 1, w0);
  }

  DenoiserConfig cfg_;
  std::vector<ParamBlockInfo> blocks_;
  long total_ = 0;
  Handles h_;
  Vec params_;
};

// ---------------------------------------------------------------------------
// Checkpoint persistence: meta.json (config, block index, provenance) plus
// params.f32 with blocks concatenated in index order.

inline void save_checkpoint(const Denoiser& d, const std::filesystem::path& dir,
                            const json& provenance = json::object()) {
  std::filesystem::create_directories(dir);
  json meta;
  meta["format_version"] = kCheckpointFormatVersion;
  meta["kind"] = "checkpoint";
  meta["config"] = d.config().to_json();
  meta["param_count"] = d.param_count();
  json blocks = json::array();
  for (const auto& b : d.blocks())
    blocks.push_back({{"name", b.name}, {"rows", b.rows}, {"cols", b.cols}});
  meta["blocks"] = blocks;
  meta["provenance"] = provenance;
  io::write_atomic(dir / "meta.json", [&](const std::filesystem::path& p) {
    io::write_json(p, meta);
  });
  io::write_atomic(dir / "params.f32", [&](const std::filesystem::path& p) {
    io::write_f32(p, io::to_f32(d.params()));
  });
}

inline Denoiser load_checkpoint(const std::filesystem::path& dir,
                                json* provenance_out = nullptr) {
  const json meta = io::read_json(dir / "meta.json");
  require(meta.value("format_version", -1) == kCheckpointFormatVersion,
          Errc::version_mismatch,
          "checkpoint format " + meta.value("format_version", json()).dump());
  Denoiser d(DenoiserConfig::from_json(meta.at("config")));
  const json& blocks = meta.at("blocks");
  require(blocks.size() == d.blocks().size(), Errc::shape_mismatch,
          "checkpoint block count");
  for (size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = d.blocks()[i];
    require(blocks[i].at("name") == b.name &&
                blocks[i].at("rows") == b.rows && blocks[i].at("cols") == b.cols,
            Errc::shape_mismatch, "checkpoint block " + b.name);
  }
  const std::vector<float> blob = io::read_f32(dir / "params.f32");
  require(static_cast<long>(blob.size()) == d.param_count(),
          Errc::row_count_mismatch,
          "params.f32 holds " + std::to_string(blob.size()) +
              " floats, expected " + std::to_string(d.param_count()));
  for (long i = 0; i < d.param_count(); ++i)
    d.params()[i] = static_cast<double>(blob[static_cast<size_t>(i)]);
  if (provenance_out) *provenance_out = meta.value("provenance", json::object());
  return d;
}

// Row-per-sample batched evaluation; worker threads split the batch but the
// per-sample arithmetic is identical to predict().
inline Mat predict_batch(const Denoiser& d, const Mat& xs,
                         const std::vector<int>& ks, const Mat* ys) {
  require(static_cast<long>(ks.size()) == xs.rows(), Errc::shape_mismatch,
          "predict_batch steps");
  require(ys == nullptr || ys->rows() == xs.rows(), Errc::shape_mismatch,
          "predict_batch conditions");
  Mat out(xs.rows(), xs.cols());
  parallel_chunks(xs.rows(), 8, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i) {
      const Vec x = xs.row(i).transpose();
      if (ys == nullptr) {
        out.row(i) = d.predict(x, ks[i], nullptr).transpose();
      } else {
        const Vec y = ys->row(i).transpose();
        out.row(i) = d.predict(x, ks[i], &y).transpose();
      }
    }
  });
  return out;
}

// Guards sampling/evaluation against mixing checkpoints across tasks.
inline void ensure_compatible(const DenoiserConfig& cfg, const Task& task) {
  require(cfg.traj_steps == task.timesteps &&
              cfg.traj_channels == task.controls_per_step() &&
              cfg.condition_dim == task.condition_dim(),
          Errc::shape_mismatch,
          std::string("checkpoint dims do not match task ") +
              task_name(task.kind));
}

}  // namespace trajdiff
