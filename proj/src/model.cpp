#include "aircoop/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

namespace aircoop {

namespace {

Parameter make_param(const std::string& name, const Shape& shape, Rng& rng, double stddev) {
  Parameter p;
  p.name = name;
  p.tensor = stddev == 0.0 ? Tensor::zeros(shape, true) : Tensor::randn(shape, rng, stddev, true);
  return p;
}

double he_std(std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

[[noreturn]] void config_error(const std::string& msg) { throw std::invalid_argument(msg); }

}  // namespace

void BevFeature::check() const {
  extent.validate();
  const Shape& s = tensor.shape();
  if (s.size() != 3 || s[1] != extent.grid_h() || s[2] != extent.grid_w())
    config_error("BevFeature: tensor " + shape_str(s) + " does not match extent grid " +
                 std::to_string(extent.grid_h()) + "x" + std::to_string(extent.grid_w()));
}

// ---- layers ----

Conv2dLayer Conv2dLayer::make(const std::string& name, std::size_t in, std::size_t out,
                              std::size_t ksize, std::size_t groups, Rng& rng, bool zero_init) {
  Conv2dLayer l;
  l.groups = groups;
  l.padding = ksize / 2;
  std::size_t fan_in = (in / groups) * ksize * ksize;
  l.weight = make_param(name + ".w", {out, in / groups, ksize, ksize}, rng,
                        zero_init ? 0.0 : he_std(fan_in));
  l.bias = make_param(name + ".b", {out}, rng, 0.0);
  return l;
}

Tensor Conv2dLayer::forward(const Tensor& x) const {
  return conv2d(x, weight.tensor, bias.tensor, groups, padding);
}

void Conv2dLayer::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

LinearLayer LinearLayer::make(const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                              bool zero_init) {
  LinearLayer l;
  l.weight = make_param(name + ".w", {in, out}, rng, zero_init ? 0.0 : he_std(in));
  l.bias = make_param(name + ".b", {out}, rng, 0.0);
  return l;
}

Tensor LinearLayer::forward(const Tensor& x) const {
  if (x.ndim() == 1) {
    Tensor row = reshape(x, {1, x.shape()[0]});
    Tensor out = add(matmul(row, weight.tensor), bias.tensor);
    return reshape(out, {out.shape()[1]});
  }
  return add(matmul(x, weight.tensor), bias.tensor);
}

void LinearLayer::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

LayerNormLayer LayerNormLayer::make(const std::string& name, std::size_t dim) {
  LayerNormLayer l;
  l.gamma.name = name + ".gamma";
  l.gamma.tensor = Tensor::full({dim}, 1.0, true);
  l.beta.name = name + ".beta";
  l.beta.tensor = Tensor::zeros({dim}, true);
  return l;
}

Tensor LayerNormLayer::forward(const Tensor& x) const {
  return layer_norm(x, gamma.tensor, beta.tensor);
}

void LayerNormLayer::collect(std::vector<Parameter*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

Tensor channel_layer_norm(const Tensor& x, const LayerNormLayer& ln) {
  // [C,H,W] -> [H,W,C] -> LN over C -> back
  Tensor hwc = permute(x, {1, 2, 0});
  Tensor normed = ln.forward(hwc);
  return permute(normed, {2, 0, 1});
}

// ---- encoder ----

EncoderModule EncoderModule::make(const std::string& name, const ModelConfig& cfg, Rng& rng) {
  EncoderModule e;
  e.conv1 = Conv2dLayer::make(name + ".conv1", cfg.raster_channels, cfg.enc_hidden, 3, 1, rng);
  e.conv2 = Conv2dLayer::make(name + ".conv2", cfg.enc_hidden, cfg.channels, 3, 1, rng);
  return e;
}

Tensor EncoderModule::forward(const Tensor& raster) const {
  Tensor x = gelu(conv1.forward(raster));
  const Shape& s = x.shape();
  // contract-friendly downsampling: half-size bilinear == 2x2 average pooling
  x = bilinear_resample(x, s[1] / 2, s[2] / 2);
  return gelu(conv2.forward(x));
}

void EncoderModule::collect(std::vector<Parameter*>& out) {
  conv1.collect(out);
  conv2.collect(out);
}

Tensor raster_to_tensor(const Raster& r, const ModelConfig& cfg) {
  if (r.channels != cfg.raster_channels)
    config_error("encode: raster has " + std::to_string(r.channels) + " channels, expected " +
                 std::to_string(cfg.raster_channels));
  std::vector<double> d(r.data.begin(), r.data.end());
  return Tensor::from_data({r.channels, r.h, r.w}, std::move(d));
}

// ---- CDSC ----

ConvNeXtBlock ConvNeXtBlock::make(const std::string& name, std::size_t dim, Rng& rng) {
  ConvNeXtBlock b;
  b.dw = Conv2dLayer::make(name + ".dw", dim, dim, 7, dim, rng);
  b.norm = LayerNormLayer::make(name + ".norm", dim);
  b.pw1 = Conv2dLayer::make(name + ".pw1", dim, 4 * dim, 1, 1, rng);
  b.pw2 = Conv2dLayer::make(name + ".pw2", 4 * dim, dim, 1, 1, rng);
  return b;
}

Tensor ConvNeXtBlock::forward(const Tensor& x) const {
  Tensor y = dw.forward(x);
  y = channel_layer_norm(y, norm);
  y = pw1.forward(y);
  y = gelu(y);
  y = pw2.forward(y);
  return add(x, y);
}

void ConvNeXtBlock::collect(std::vector<Parameter*>& out) {
  dw.collect(out);
  norm.collect(out);
  pw1.collect(out);
  pw2.collect(out);
}

CdscModule CdscModule::make(const std::string& name, const ModelConfig& cfg, Rng& rng) {
  CdscModule m;
  m.phi_in = Conv2dLayer::make(name + ".phi_in", cfg.channels, cfg.cdsc_hidden, 1, 1, rng);
  for (std::size_t i = 0; i < cfg.cdsc_blocks; ++i)
    m.blocks.push_back(ConvNeXtBlock::make(name + ".block" + std::to_string(i), cfg.cdsc_hidden,
                                           rng));
  m.phi_out = Conv2dLayer::make(name + ".phi_out", cfg.cdsc_hidden, cfg.channels, 1, 1, rng);
  return m;
}

Tensor CdscModule::map(const Tensor& f) const {
  if (f.shape().size() != 3 || f.shape()[0] != phi_in.weight.tensor.shape()[1])
    config_error("cdsc_map: input channels " + shape_str(f.shape()) + " do not match phi_in");
  Tensor x = phi_in.forward(f);
  for (const auto& b : blocks) x = b.forward(x);
  return phi_out.forward(x);
}

void CdscModule::collect(std::vector<Parameter*>& out) {
  phi_in.collect(out);
  for (auto& b : blocks) b.collect(out);
  phi_out.collect(out);
}

BevFeature cdsc_rescale(const BevFeature& f, double lambda) {
  if (!(lambda > 0)) config_error("cdsc_rescale: lambda must be positive");
  const Shape& s = f.tensor.shape();
  auto new_h = static_cast<std::size_t>(std::llround(static_cast<double>(s[1]) * lambda));
  auto new_w = static_cast<std::size_t>(std::llround(static_cast<double>(s[2]) * lambda));
  if (new_h == 0 || new_w == 0) config_error("cdsc_rescale: lambda collapses the grid to zero");
  BevFeature out;
  out.source_kind = f.source_kind;
  out.tensor = (new_h == s[1] && new_w == s[2]) ? f.tensor
                                                : bilinear_resample(f.tensor, new_h, new_w);
  out.extent = f.extent;
  double cell_x = (f.extent.x_max - f.extent.x_min) / static_cast<double>(new_w);
  double cell_y = (f.extent.y_max - f.extent.y_min) / static_cast<double>(new_h);
  if (std::fabs(cell_x - cell_y) > 1e-9 * cell_x)
    config_error("cdsc_rescale: anisotropic cells after rescale");
  out.extent.cell = cell_x;
  out.check();
  return out;
}

// ---- SOPT ----

SoptEncoderLayer SoptEncoderLayer::make(const std::string& name, std::size_t dim,
                                        std::size_t heads, Rng& rng) {
  if (heads == 0 || dim % heads != 0)
    config_error("sopt: embed dim " + std::to_string(dim) + " not divisible by " +
                 std::to_string(heads) + " heads");
  SoptEncoderLayer l;
  l.heads = heads;
  l.ln1 = LayerNormLayer::make(name + ".ln1", dim);
  l.wq = LinearLayer::make(name + ".wq", dim, dim, rng);
  l.wk = LinearLayer::make(name + ".wk", dim, dim, rng);
  l.wv = LinearLayer::make(name + ".wv", dim, dim, rng);
  l.wo = LinearLayer::make(name + ".wo", dim, dim, rng);
  l.ln2 = LayerNormLayer::make(name + ".ln2", dim);
  l.ffn1 = LinearLayer::make(name + ".ffn1", dim, 4 * dim, rng);
  l.ffn2 = LinearLayer::make(name + ".ffn2", 4 * dim, dim, rng);
  return l;
}

Tensor SoptEncoderLayer::forward(const Tensor& x) const {
  std::size_t S = x.shape()[0];
  std::size_t D = x.shape()[1];
  std::size_t dh = D / heads;

  Tensor h = ln1.forward(x);
  auto split_heads = [&](const Tensor& t) {
    return permute(reshape(t, {S, heads, dh}), {1, 0, 2});  // [heads, S, dh]
  };
  Tensor q = split_heads(wq.forward(h));
  Tensor k = split_heads(wk.forward(h));
  Tensor v = split_heads(wv.forward(h));
  Tensor scores = mul_scalar(matmul(q, permute(k, {0, 2, 1})),
                             1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor attn = softmax(scores);                 // [heads, S, S]
  Tensor ctx = matmul(attn, v);                  // [heads, S, dh]
  Tensor merged = reshape(permute(ctx, {1, 0, 2}), {S, D});
  Tensor x1 = add(x, wo.forward(merged));        // X' = MSA(LN(X)) + X

  Tensor h2 = ln2.forward(x1);
  Tensor f = ffn2.forward(gelu(ffn1.forward(h2)));
  return add(x1, f);                             // X = FFN(LN(X')) + X'
}

void SoptEncoderLayer::collect(std::vector<Parameter*>& out) {
  ln1.collect(out);
  wq.collect(out);
  wk.collect(out);
  wv.collect(out);
  wo.collect(out);
  ln2.collect(out);
  ffn1.collect(out);
  ffn2.collect(out);
}

SoptModule SoptModule::make(const std::string& name, const ModelConfig& cfg, std::size_t feat_h,
                            std::size_t feat_w, Rng& rng) {
  SoptModule m;
  m.pool = cfg.sopt_pool;
  m.grid_h = std::max<std::size_t>(1, feat_h / m.pool);
  m.grid_w = std::max<std::size_t>(1, feat_w / m.pool);
  m.tau_c = cfg.tau_c;
  m.proj = Conv2dLayer::make(name + ".proj", cfg.channels, cfg.embed_dim, 1, 1, rng);
  m.e_pos = make_param(name + ".e_pos", {cfg.embed_dim, m.grid_h, m.grid_w}, rng, 0.02);
  for (std::size_t i = 0; i < cfg.sopt_layers; ++i)
    m.layers.push_back(SoptEncoderLayer::make(name + ".layer" + std::to_string(i),
                                              cfg.embed_dim, cfg.sopt_heads, rng));
  m.ln_head = LayerNormLayer::make(name + ".ln_head", cfg.embed_dim);
  m.mlp1 = LinearLayer::make(name + ".mlp1", cfg.embed_dim, cfg.sopt_mlp_hidden, rng);
  // zero-initialized final layer: the offset starts at exactly (0, 0, 0)
  m.mlp2 = LinearLayer::make(name + ".mlp2", cfg.sopt_mlp_hidden, 3, rng, true);
  return m;
}

Tensor SoptModule::tokenize(const Tensor& feat) const {
  const Shape& s = feat.shape();
  if (s.size() != 3 || s[1] != grid_h || s[2] != grid_w)
    config_error("sopt_tokenize: feature " + shape_str(s) + " does not match the " +
                 std::to_string(grid_h) + "x" + std::to_string(grid_w) + " token grid");
  Tensor x = add(proj.forward(feat), e_pos.tensor);     // [D, H, W]
  // row-major (y, x) flattening of grid cells into the token axis
  return reshape(permute(x, {1, 2, 0}), {grid_h * grid_w, x.shape()[0]});
}

Tensor SoptModule::encode_tokens(Tensor x) const {
  for (const auto& l : layers) x = l.forward(x);
  return x;
}

Tensor SoptModule::regress_offset(const Tensor& tokens) const {
  Tensor g = global_avg_pool(tokens);
  Tensor h = ln_head.forward(g);
  Tensor raw = mlp2.forward(gelu(mlp1.forward(h)));
  Tensor lo = Tensor::from_data({3}, {-tau_c[0], -tau_c[1], -tau_c[2]});
  Tensor hi = Tensor::from_data({3}, {tau_c[0], tau_c[1], tau_c[2]});
  return clamp(raw, lo, hi);
}

Tensor SoptModule::forward(const Tensor& cdsc_out) const {
  Tensor feat = cdsc_out;
  const Shape& s = cdsc_out.shape();
  if (s[1] != grid_h || s[2] != grid_w) feat = bilinear_resample(cdsc_out, grid_h, grid_w);
  return regress_offset(encode_tokens(tokenize(feat)));
}

void SoptModule::collect(std::vector<Parameter*>& out) {
  proj.collect(out);
  out.push_back(&e_pos);
  for (auto& l : layers) l.collect(out);
  ln_head.collect(out);
  mlp1.collect(out);
  mlp2.collect(out);
}

// ---- fusion + head ----

FusionModule FusionModule::make(const std::string& name, const ModelConfig& cfg, Rng& rng) {
  FusionModule f;
  f.merge = Conv2dLayer::make(name + ".merge", 2 * cfg.channels, cfg.channels, 1, 1, rng);
  return f;
}

Tensor FusionModule::forward(const std::vector<Tensor>& agent_feats) const {
  if (agent_feats.empty()) config_error("fuse: no agent features");
  const Shape& s0 = agent_feats[0].shape();
  for (const auto& f : agent_feats)
    if (f.shape() != s0)
      config_error("fuse: feature shape mismatch " + shape_str(f.shape()) + " vs " +
                   shape_str(s0));
  Tensor fine = agent_feats[0];
  for (std::size_t i = 1; i < agent_feats.size(); ++i) fine = maximum(fine, agent_feats[i]);
  std::size_t ch = std::max<std::size_t>(1, s0[1] / 2);
  std::size_t cw = std::max<std::size_t>(1, s0[2] / 2);
  Tensor coarse = bilinear_resample(agent_feats[0], ch, cw);
  for (std::size_t i = 1; i < agent_feats.size(); ++i)
    coarse = maximum(coarse, bilinear_resample(agent_feats[i], ch, cw));
  Tensor up = bilinear_resample(coarse, s0[1], s0[2]);
  return merge.forward(concat_axis0(fine, up));
}

void FusionModule::collect(std::vector<Parameter*>& out) { merge.collect(out); }

DetectionHead DetectionHead::make(const std::string& name, const ModelConfig& cfg, Rng& rng) {
  DetectionHead h;
  h.cls = Conv2dLayer::make(name + ".cls", cfg.channels, 1, 1, 1, rng);
  // background-prior bias keeps early focal loss small
  h.cls.bias.tensor.raw_data()[0] = -4.0;
  h.reg = Conv2dLayer::make(name + ".reg", cfg.channels, 7, 1, 1, rng, true);
  return h;
}

DetectionOutput DetectionHead::forward(const Tensor& fused) const {
  return {cls.forward(fused), reg.forward(fused)};
}

void DetectionHead::collect(std::vector<Parameter*>& out) {
  cls.collect(out);
  reg.collect(out);
}

// ---- anchors / decode ----

AnchorGrid AnchorGrid::make(const BevExtent& feat_extent, const ModelConfig& cfg) {
  AnchorGrid g;
  g.extent = feat_extent;
  g.l = cfg.anchor_l;
  g.w = cfg.anchor_w;
  g.h = cfg.anchor_h;
  g.z = cfg.anchor_z;
  g.yaw = cfg.anchor_yaw;
  return g;
}

OrientedBox3 AnchorGrid::box_at(std::size_t gy, std::size_t gx) const {
  OrientedBox3 b;
  b.x = extent.x_min + (static_cast<double>(gx) + 0.5) * extent.cell;
  b.y = extent.y_min + (static_cast<double>(gy) + 0.5) * extent.cell;
  b.z = z;
  b.l = l;
  b.w = w;
  b.h = h;
  b.yaw = yaw;
  return b;
}

double AnchorGrid::diagonal() const { return std::hypot(l, w); }

std::array<double, 7> encode_box(const OrientedBox3& gt, const OrientedBox3& anchor,
                                 double diagonal) {
  return {(gt.x - anchor.x) / diagonal,
          (gt.y - anchor.y) / diagonal,
          (gt.z - anchor.z) / anchor.h,
          std::log(gt.l / anchor.l),
          std::log(gt.w / anchor.w),
          std::log(gt.h / anchor.h),
          normalize_angle(gt.yaw - anchor.yaw)};
}

OrientedBox3 decode_box(const std::array<double, 7>& r, const OrientedBox3& anchor,
                        double diagonal) {
  OrientedBox3 b;
  b.x = anchor.x + r[0] * diagonal;
  b.y = anchor.y + r[1] * diagonal;
  b.z = anchor.z + r[2] * anchor.h;
  b.l = anchor.l * std::exp(r[3]);
  b.w = anchor.w * std::exp(r[4]);
  b.h = anchor.h * std::exp(r[5]);
  b.yaw = normalize_angle(anchor.yaw + r[6]);
  return b;
}

std::vector<OrientedBox3> nms_bev(std::vector<OrientedBox3> boxes, double iou_threshold) {
  std::stable_sort(boxes.begin(), boxes.end(),
                   [](const OrientedBox3& a, const OrientedBox3& b) { return a.score > b.score; });
  std::vector<OrientedBox3> keep;
  for (const auto& b : boxes) {
    bool suppressed = false;
    for (const auto& k : keep)
      if (iou_bev(b, k) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) keep.push_back(b);
  }
  return keep;
}

std::vector<OrientedBox3> decode_detections(const DetectionOutput& out, const AnchorGrid& anchors,
                                            double score_threshold) {
  const Shape& cs = out.cls_logits.shape();
  std::size_t H = cs[1], W = cs[2];
  auto cls = out.cls_logits.data();
  auto reg = out.reg_residuals.data();
  double diag = anchors.diagonal();
  std::vector<OrientedBox3> result;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      double logit = cls[y * W + x];
      double score = 1.0 / (1.0 + std::exp(-logit));
      if (score < score_threshold) continue;
      std::array<double, 7> r;
      for (std::size_t k = 0; k < 7; ++k) r[k] = reg[(k * H + y) * W + x];
      OrientedBox3 b = decode_box(r, anchors.box_at(y, x), diag);
      b.score = score;
      result.push_back(b);
    }
  }
  return result;
}

// ---- warp ----

BevFeature warp_to_ego(const BevFeature& f, const Pose3& pose_src, const Pose3& pose_ego) {
  f.check();
  const BevExtent& e = f.extent;
  AffineMap2 m;
  bool same_pos = pose_src.x == pose_ego.x && pose_src.y == pose_ego.y;
  if (pose_src.yaw == pose_ego.yaw) {
    // pure translation in the shared heading; exact for integral cell shifts
    double c = std::cos(pose_ego.yaw), s = std::sin(pose_ego.yaw);
    double dx_w = pose_ego.x - pose_src.x;
    double dy_w = pose_ego.y - pose_src.y;
    double ox = c * dx_w + s * dy_w;
    double oy = -s * dx_w + c * dy_w;
    if (same_pos) ox = oy = 0.0;
    m.a11 = 1;
    m.a12 = 0;
    m.a21 = 0;
    m.a22 = 1;
    m.tx = ox / e.cell;
    m.ty = oy / e.cell;
  } else {
    auto grid_to_src = [&](double gx, double gy) {
      double xe = e.x_min + (gx + 0.5) * e.cell;
      double ye = e.y_min + (gy + 0.5) * e.cell;
      Vec3 w = ego_to_world(pose_ego, {xe, ye, 0});
      Vec3 s3 = world_to_ego(pose_src, w);
      return Vec2{(s3.x - e.x_min) / e.cell - 0.5, (s3.y - e.y_min) / e.cell - 0.5};
    };
    Vec2 t0 = grid_to_src(0, 0);
    Vec2 tx1 = grid_to_src(1, 0);
    Vec2 ty1 = grid_to_src(0, 1);
    m.tx = t0.x;
    m.ty = t0.y;
    m.a11 = tx1.x - t0.x;
    m.a21 = tx1.y - t0.y;
    m.a12 = ty1.x - t0.x;
    m.a22 = ty1.y - t0.y;
  }
  BevFeature out;
  out.tensor = affine_warp(f.tensor, m);
  out.extent = f.extent;
  out.source_kind = f.source_kind;
  return out;
}

// ---- compression adapter ----

CompressionAdapter CompressionAdapter::make(const std::string& name, const ModelConfig& cfg,
                                            std::size_t rate, Rng& rng) {
  if (rate == 0 || cfg.channels % rate != 0)
    config_error("compression: rate " + std::to_string(rate) + " does not divide C=" +
                 std::to_string(cfg.channels));
  CompressionAdapter a;
  a.rate = rate;
  std::size_t bottleneck = cfg.channels / rate;
  a.enc = Conv2dLayer::make(name + ".enc", cfg.channels, bottleneck, 1, 1, rng);
  a.dec = Conv2dLayer::make(name + ".dec", bottleneck, cfg.channels, 1, 1, rng);
  return a;
}

Tensor CompressionAdapter::forward(const Tensor& feat) const {
  return dec.forward(gelu(enc.forward(feat)));
}

void CompressionAdapter::collect(std::vector<Parameter*>& out) {
  enc.collect(out);
  dec.collect(out);
}

// ---- assembled model ----

PerceptionModel PerceptionModel::make(const ModelConfig& cfg, const ScenarioConfig& scen,
                                      std::uint64_t init_seed, bool with_sopt,
                                      CdscVariant variant) {
  cfg.validate();
  PerceptionModel m;
  m.cfg = cfg;
  m.cdsc_variant = variant;

  BevExtent veh = raster_extent(scen, AgentKind::Vehicle);
  m.feature_extent = veh;
  m.feature_extent.cell = veh.cell * 2.0;  // the encoder halves the grid
  m.feature_extent.validate();

  // per-module init streams keep initialization independent of which optional
  // parts a variant instantiates
  auto stream = [&](const char* name) { return Rng::derive(init_seed, name); };
  Rng r_ve = stream("init.veh_encoder");
  m.veh_encoder = EncoderModule::make("veh_encoder", cfg, r_ve);
  Rng r_ue = stream("init.uav_encoder");
  m.uav_encoder = EncoderModule::make("uav_encoder", cfg, r_ue);
  Rng r_cd = stream("init.cdsc");
  m.cdsc = CdscModule::make("cdsc", cfg, r_cd);
  Rng r_pj = stream("init.cdsc_proj");
  m.cdsc_proj_only = Conv2dLayer::make("cdsc_proj", cfg.channels, cfg.channels, 1, 1, r_pj);
  if (with_sopt) {
    Rng r_so = stream("init.sopt");
    m.sopt = SoptModule::make("sopt", cfg, m.feature_extent.grid_h(), m.feature_extent.grid_w(),
                              r_so);
  }
  Rng r_fu = stream("init.fusion");
  m.fusion = FusionModule::make("fusion", cfg, r_fu);
  Rng r_he = stream("init.head");
  m.head = DetectionHead::make("head", cfg, r_he);
  return m;
}

std::vector<Parameter*> PerceptionModel::parameters() {
  std::vector<Parameter*> out;
  veh_encoder.collect(out);
  uav_encoder.collect(out);
  cdsc.collect(out);
  cdsc_proj_only.collect(out);
  if (sopt) sopt->collect(out);
  fusion.collect(out);
  head.collect(out);
  return out;
}

std::vector<Parameter*> PerceptionModel::parameters_with_prefix(const std::string& prefix) {
  std::vector<Parameter*> out;
  for (Parameter* p : parameters())
    if (p->name.rfind(prefix, 0) == 0) out.push_back(p);
  return out;
}

void PerceptionModel::freeze_prefix(const std::string& prefix, bool frozen) {
  for (Parameter* p : parameters_with_prefix(prefix)) p->set_frozen(frozen);
}

BevFeature PerceptionModel::encode_agent(const Frame& frame, std::size_t agent_index,
                                         const ScenarioConfig& scen) const {
  const AgentSpec& agent = frame.agents.at(agent_index);
  const Raster& raster = frame.observations.at(agent_index);
  Tensor input = raster_to_tensor(raster, cfg);
  BevFeature f;
  f.source_kind = agent.kind;
  f.extent = raster_extent(scen, agent.kind);
  f.extent.cell *= 2.0;  // encoder stride
  if (agent.kind == AgentKind::Vehicle) {
    f.tensor = veh_encoder.forward(input);
    f.check();
    return f;
  }
  f.tensor = uav_encoder.forward(input);
  f.check();
  // lambda = target resolution / UAV resolution = uav cell / target cell
  double lambda = f.extent.cell / feature_extent.cell;
  BevFeature rescaled = cdsc_rescale(f, lambda);
  BevFeature out;
  out.source_kind = AgentKind::Uav;
  out.extent = rescaled.extent;
  out.tensor = cdsc_variant == CdscVariant::Full ? cdsc.map(rescaled.tensor)
                                                 : cdsc_proj_only.forward(rescaled.tensor);
  out.check();
  return out;
}

Tensor PerceptionModel::sopt_offset(const BevFeature& uav_feature) const {
  if (!sopt) config_error("sopt_offset: model built without SOPT");
  return sopt->forward(uav_feature.tensor);
}

std::vector<std::size_t> select_fleet(const Frame& frame, std::size_t n_vehicles,
                                      std::size_t n_uavs) {
  if (n_vehicles < 1) config_error("select_fleet: at least the ego vehicle is required");
  std::vector<std::size_t> out{frame.ego_index};
  for (std::size_t i = 0; i < frame.agents.size() && out.size() < n_vehicles; ++i)
    if (i != frame.ego_index && frame.agents[i].kind == AgentKind::Vehicle) out.push_back(i);
  if (out.size() < n_vehicles)
    config_error("select_fleet: frame has fewer than " + std::to_string(n_vehicles) +
                 " vehicles");
  std::size_t got_uavs = 0;
  for (std::size_t i = 0; i < frame.agents.size() && got_uavs < n_uavs; ++i)
    if (frame.agents[i].kind == AgentKind::Uav) {
      out.push_back(i);
      ++got_uavs;
    }
  if (got_uavs < n_uavs)
    config_error("select_fleet: frame has fewer than " + std::to_string(n_uavs) + " UAVs");
  return out;
}

std::array<double, 3> offset_ground_truth(const Pose3& uav, const Pose3& ego) {
  Vec3 p = world_to_ego(ego, {uav.x, uav.y, uav.z});
  return {p.x, p.y, p.z};
}

ForwardResult forward_frame(const PerceptionModel& model, const Frame& frame,
                            const std::vector<std::size_t>& fleet, const ScenarioConfig& scen,
                            const ForwardOptions& opts) {
  if (fleet.empty() || fleet[0] != frame.ego_index)
    config_error("forward_frame: fleet must start with the ego agent");
  const Pose3& ego_pose = frame.agents[frame.ego_index].pose;
  ForwardResult res;
  std::vector<Tensor> warped;
  for (std::size_t idx : fleet) {
    const AgentSpec& agent = frame.agents[idx];
    BevFeature f = model.encode_agent(frame, idx, scen);
    if (agent.kind == AgentKind::Uav && opts.collect_offsets && model.sopt) {
      res.uav_offsets.push_back(model.sopt_offset(f));
      res.uav_offset_gt.push_back(offset_ground_truth(agent.pose, ego_pose));
    }
    if (opts.adapter && idx != frame.ego_index) f.tensor = opts.adapter->forward(f.tensor);
    BevFeature w = warp_to_ego(f, agent.pose, ego_pose);
    warped.push_back(w.tensor);
  }
  res.fused = model.fusion.forward(warped);
  res.det = model.head.forward(res.fused);
  return res;
}

std::vector<CheckpointEntry> model_state(PerceptionModel& model) {
  std::vector<CheckpointEntry> out;
  for (Parameter* p : model.parameters()) {
    CheckpointEntry e;
    e.name = p->name;
    e.shape = p->tensor.shape();
    e.frozen = p->frozen;
    e.data.assign(p->tensor.data().begin(), p->tensor.data().end());
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<std::string> load_state(PerceptionModel& model,
                                    const std::vector<CheckpointEntry>& entries,
                                    bool require_all_model_params) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  std::vector<std::string> matched;
  for (Parameter* p : model.parameters()) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) {
      if (require_all_model_params && p->name.rfind("sopt.", 0) != 0)
        throw std::runtime_error("checkpoint is missing parameter '" + p->name + "'");
      continue;
    }
    const CheckpointEntry& e = *it->second;
    if (e.shape != p->tensor.shape())
      throw std::runtime_error("checkpoint shape mismatch for '" + p->name + "': " +
                               shape_str(e.shape) + " vs " + shape_str(p->tensor.shape()));
    std::copy(e.data.begin(), e.data.end(), p->tensor.raw_data().begin());
    p->set_frozen(e.frozen);
    matched.push_back(p->name);
  }
  return matched;
}

}  // namespace aircoop
