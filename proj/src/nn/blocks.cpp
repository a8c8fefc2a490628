#include "framefuse/nn/blocks.hpp"

#include <cmath>
#include <random>

namespace framefuse::nn {

void BlockConfig::validate() const {
  if (d <= 0 || heads <= 0 || p <= 0 || m <= 0 || n <= 0 || res <= 0 || mlp_ratio <= 0)
    throw InputError("block config: all dimensions must be positive");
  if (d % heads != 0) throw InputError("block config: d must be divisible by heads");
  if (res % p != 0) throw InputError("block config: resolution must be divisible by patch size");
}

LinearParams make_linear(ParameterStore& s, const std::string& name, int in, int out) {
  return {&s.create(name + "/w", in, out), &s.create(name + "/b", 1, out)};
}

LayerNormParams make_layer_norm(ParameterStore& s, const std::string& name, int d) {
  return {&s.create(name + "/gain", 1, d), &s.create(name + "/bias", 1, d)};
}

AttentionParams make_attention(ParameterStore& s, const std::string& name, int d) {
  return {make_linear(s, name + "/q", d, d), make_linear(s, name + "/k", d, d),
          make_linear(s, name + "/v", d, d), make_linear(s, name + "/o", d, d)};
}

EncoderBlockParams make_encoder_block(ParameterStore& s, const std::string& name,
                                      const BlockConfig& cfg) {
  int hidden = static_cast<int>(cfg.d * cfg.mlp_ratio);
  return {make_layer_norm(s, name + "/ln1", cfg.d),
          make_layer_norm(s, name + "/ln2", cfg.d),
          make_attention(s, name + "/attn", cfg.d),
          make_linear(s, name + "/fc1", cfg.d, hidden),
          make_linear(s, name + "/fc2", hidden, cfg.d)};
}

DecoderBlockParams make_decoder_block(ParameterStore& s, const std::string& name,
                                      const BlockConfig& cfg) {
  int hidden = static_cast<int>(cfg.d * cfg.mlp_ratio);
  return {make_layer_norm(s, name + "/ln_self", cfg.d),
          make_layer_norm(s, name + "/ln_query", cfg.d),
          make_layer_norm(s, name + "/ln_kv", cfg.d),
          make_layer_norm(s, name + "/ln_mlp", cfg.d),
          make_attention(s, name + "/self", cfg.d),
          make_attention(s, name + "/cross", cfg.d),
          make_linear(s, name + "/fc1", cfg.d, hidden),
          make_linear(s, name + "/fc2", hidden, cfg.d)};
}

PatchEmbedParams make_patch_embed(ParameterStore& s, const std::string& name, int channels,
                                  const BlockConfig& cfg) {
  return {make_linear(s, name + "/proj", channels * cfg.p * cfg.p, cfg.d)};
}

HeadParams make_head(ParameterStore& s, const std::string& name, int out_channels,
                     const BlockConfig& cfg) {
  return {make_layer_norm(s, name + "/ln", cfg.d),
          make_linear(s, name + "/out", cfg.d, out_channels * cfg.p * cfg.p)};
}

// ---------------------------------------------------------------------------

namespace {

Eigen::MatrixXd patch_matrix_from(const Eigen::Matrix<double, Eigen::Dynamic, 3>& grid,
                                  const std::vector<std::uint8_t>* valid, int height, int width,
                                  int p) {
  if (height % p != 0 || width % p != 0)
    throw InputError("shape error: image dimensions not divisible by patch size");
  const int gr = height / p, gc = width / p, pp = p * p;
  Eigen::MatrixXd out(gr * gc, 3 * pp);
  for (int tr = 0; tr < gr; ++tr) {
    for (int tc = 0; tc < gc; ++tc) {
      int t = tr * gc + tc;
      for (int pr = 0; pr < p; ++pr) {
        for (int pc = 0; pc < p; ++pc) {
          int row = tr * p + pr, col = tc * p + pc;
          int idx = row * width + col;
          int j = pr * p + pc;
          bool ok = !valid || (*valid)[static_cast<std::size_t>(idx)] != 0;
          for (int ch = 0; ch < 3; ++ch) out(t, ch * pp + j) = ok ? grid(idx, ch) : 0.0;
        }
      }
    }
  }
  return out;
}

}  // namespace

Eigen::MatrixXd image_patch_matrix(const Image& image, int p) {
  return patch_matrix_from(image.rgb, nullptr, image.height, image.width, p);
}

Eigen::MatrixXd pointmap_patch_matrix(const Pointmap& pm, int p) {
  return patch_matrix_from(pm.points, &pm.valid, pm.height, pm.width, p);
}

Eigen::MatrixXd unpatchify_channel(const Eigen::MatrixXd& raw, int p, int grid_rows,
                                   int grid_cols, int channel) {
  const int pp = p * p;
  if (raw.rows() != grid_rows * grid_cols || (channel + 1) * pp > raw.cols())
    throw InputError("shape error: unpatchify raw dimensions");
  Eigen::MatrixXd out(grid_rows * p, grid_cols * p);
  for (int tr = 0; tr < grid_rows; ++tr)
    for (int tc = 0; tc < grid_cols; ++tc) {
      int t = tr * grid_cols + tc;
      for (int pr = 0; pr < p; ++pr)
        for (int pc = 0; pc < p; ++pc)
          out(tr * p + pr, tc * p + pc) = raw(t, channel * pp + pr * p + pc);
    }
  return out;
}

Eigen::MatrixXd sinusoidal_position_codes(int grid_rows, int grid_cols, int d) {
  if (d % 4 != 0) throw InputError("position codes need d divisible by 4");
  const int quarter = d / 4;
  Eigen::MatrixXd codes(grid_rows * grid_cols, d);
  for (int tr = 0; tr < grid_rows; ++tr) {
    for (int tc = 0; tc < grid_cols; ++tc) {
      int t = tr * grid_cols + tc;
      for (int i = 0; i < quarter; ++i) {
        double omega = std::pow(10000.0, -static_cast<double>(i) / quarter);
        codes(t, 4 * i + 0) = std::sin(tc * omega);
        codes(t, 4 * i + 1) = std::cos(tc * omega);
        codes(t, 4 * i + 2) = std::sin(tr * omega);
        codes(t, 4 * i + 3) = std::cos(tr * omega);
      }
    }
  }
  return codes;
}

// ---------------------------------------------------------------------------

Value linear(Graph& g, const LinearParams& p, Value x) {
  return g.add_rowvec(g.matmul(x, g.param(*p.w)), g.param(*p.b));
}

Value layer_norm(Graph& g, const LayerNormParams& p, Value x) {
  return g.layer_norm(x, g.param(*p.gain), g.param(*p.bias));
}

Value attention(Graph& g, const AttentionParams& p, int heads, Value q_in, Value kv_in) {
  const int d = static_cast<int>(p.q.w->value.rows());
  if (q_in.cols() != d || kv_in.cols() != d)
    throw InputError("shape error: attention token width mismatch");
  if (heads <= 0 || d % heads != 0) throw InputError("attention: bad head count");
  const int dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Value q = linear(g, p.q, q_in);
  Value k = linear(g, p.k, kv_in);
  Value v = linear(g, p.v, kv_in);

  std::vector<Value> heads_out;
  heads_out.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Value qh = g.col_block(q, h * dh, dh);
    Value kh = g.col_block(k, h * dh, dh);
    Value vh = g.col_block(v, h * dh, dh);
    Value scores = g.scale(g.matmul_nt(qh, kh), inv_sqrt);
    heads_out.push_back(g.matmul(g.softmax_rows(scores), vh));
  }
  return linear(g, p.o, g.concat_cols(heads_out));
}

namespace {

Value mlp(Graph& g, const LinearParams& fc1, const LinearParams& fc2, Value x) {
  return linear(g, fc2, g.gelu(linear(g, fc1, x)));
}

}  // namespace

Value encoder_block(Graph& g, const EncoderBlockParams& p, int heads, Value x) {
  Value normed = layer_norm(g, p.ln1, x);
  x = g.add(x, attention(g, p.attn, heads, normed, normed));
  x = g.add(x, mlp(g, p.fc1, p.fc2, layer_norm(g, p.ln2, x)));
  return x;
}

Value multiview_decoder_block(Graph& g, const DecoderBlockParams& p, int heads, Value x,
                              std::span<const Value> supports) {
  if (supports.empty()) throw InputError("multiview decoder block: empty support list");
  Value normed = layer_norm(g, p.ln_self, x);
  x = g.add(x, attention(g, p.self_attn, heads, normed, normed));

  Value query = layer_norm(g, p.ln_query, x);
  std::vector<Value> branches;
  branches.reserve(supports.size());
  for (const Value& s : supports)
    branches.push_back(attention(g, p.cross_attn, heads, query, layer_norm(g, p.ln_kv, s)));
  Value aggregated = branches.size() == 1 ? branches[0] : g.cwise_max(branches);
  x = g.add(x, aggregated);

  x = g.add(x, mlp(g, p.fc1, p.fc2, layer_norm(g, p.ln_mlp, x)));
  return x;
}

Value patch_embed(Graph& g, const PatchEmbedParams& p, const Eigen::MatrixXd& patch_matrix,
                  int grid_rows, int grid_cols, int d, bool position_codes) {
  Value tokens = linear(g, p.proj, g.constant(patch_matrix));
  if (position_codes)
    tokens = g.add(tokens, g.constant(sinusoidal_position_codes(grid_rows, grid_cols, d)));
  return tokens;
}

Value head_raw(Graph& g, const HeadParams& p, Value tokens) {
  return linear(g, p.out, layer_norm(g, p.norm, tokens));
}

// ---------------------------------------------------------------------------

TokenGrid patchify_image(const Image& image, int p, const PatchEmbedParams& params, int d) {
  Graph g(false);
  Value tokens = patch_embed(g, params, image_patch_matrix(image, p), image.height / p,
                             image.width / p, d, true);
  return {tokens.mat(), image.height / p, image.width / p};
}

TokenGrid attention_tokens(const TokenGrid& q, const TokenGrid& kv, const AttentionParams& params,
                           int heads) {
  Graph g(false);
  Value out = attention(g, params, heads, g.input(q.tokens), g.input(kv.tokens));
  return {out.mat(), q.grid_rows, q.grid_cols};
}

TokenGrid encoder_block_tokens(const TokenGrid& x, const EncoderBlockParams& params, int heads) {
  Graph g(false);
  Value out = encoder_block(g, params, heads, g.input(x.tokens));
  return {out.mat(), x.grid_rows, x.grid_cols};
}

TokenGrid multiview_decoder_block_tokens(const TokenGrid& x, std::span<const TokenGrid> supports,
                                         const DecoderBlockParams& params, int heads) {
  Graph g(false);
  std::vector<Value> sup;
  sup.reserve(supports.size());
  for (const TokenGrid& s : supports) sup.push_back(g.input(s.tokens));
  Value out = multiview_decoder_block(g, params, heads, g.input(x.tokens), sup);
  return {out.mat(), x.grid_rows, x.grid_cols};
}

HeadMaps head_to_maps(const Eigen::MatrixXd& raw, int p, int grid_rows, int grid_cols) {
  const int pp = p * p;
  if (raw.cols() != 4 * pp || raw.rows() != grid_rows * grid_cols)
    throw InputError("shape error: head output dimensions");
  const int height = grid_rows * p, width = grid_cols * p;
  HeadMaps out{Pointmap(height, width), ConfidenceMap(height, width)};
  for (int tr = 0; tr < grid_rows; ++tr) {
    for (int tc = 0; tc < grid_cols; ++tc) {
      int t = tr * grid_cols + tc;
      for (int pr = 0; pr < p; ++pr) {
        for (int pc = 0; pc < p; ++pc) {
          int j = pr * p + pc;
          int idx = (tr * p + pr) * width + (tc * p + pc);
          out.points.points(idx, 0) = raw(t, 0 * pp + j);
          out.points.points(idx, 1) = raw(t, 1 * pp + j);
          out.points.points(idx, 2) = raw(t, 2 * pp + j);
          out.conf.conf(idx) = confidence_activation(raw(t, 3 * pp + j));
        }
      }
    }
  }
  return out;
}

HeadMaps regression_head(const TokenGrid& tokens, const HeadParams& params, int p) {
  Graph g(false);
  Value raw = head_raw(g, params, g.input(tokens.tokens));
  return head_to_maps(raw.mat(), p, tokens.grid_rows, tokens.grid_cols);
}

// ---------------------------------------------------------------------------

double grad_check(const std::function<double(bool with_grad)>& loss,
                  std::span<Parameter* const> tensors, double eps, int min_coords,
                  std::uint64_t seed) {
  if (!(eps > 0)) throw InputError("grad_check: invalid epsilon");
  if (tensors.empty()) throw InputError("grad_check: no tensors to check");

  for (Parameter* t : tensors) t->grad.setZero();
  double base = loss(true);
  if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss");

  long total = 0;
  for (Parameter* t : tensors) total += static_cast<long>(t->value.size());
  long n_coords = std::min<long>(total, std::max<long>(min_coords, 64));

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<long> pick(0, total - 1);

  double max_rel = 0.0;
  for (long s = 0; s < n_coords; ++s) {
    long flat = total <= n_coords ? s : pick(rng);
    Parameter* t = nullptr;
    for (Parameter* cand : tensors) {
      if (flat < static_cast<long>(cand->value.size())) {
        t = cand;
        break;
      }
      flat -= static_cast<long>(cand->value.size());
    }
    double* cell = t->value.data() + flat;
    double saved = *cell;
    *cell = saved + eps;
    double up = loss(false);
    *cell = saved - eps;
    double down = loss(false);
    *cell = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("grad_check: non-finite loss under perturbation");

    double numeric = (up - down) / (2.0 * eps);
    double analytic = *(t->grad.data() + flat);
    double rel = std::abs(analytic - numeric) /
                 std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace framefuse::nn
