#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "framefuse/geometry.hpp"
#include "framefuse/image.hpp"
#include "framefuse/nn/graph.hpp"
#include "framefuse/nn/params.hpp"

namespace framefuse::nn {

/// T x d token matrix together with its 2D grid arrangement
/// (grid_rows * grid_cols == T).
struct TokenGrid {
  Eigen::MatrixXd tokens;
  int grid_rows = 0;
  int grid_cols = 0;
};

/// Transformer dimensions. Desk-scale defaults; the full-scale sizes are
/// reachable through configuration.
struct BlockConfig {
  int d = 64;             // token width
  int heads = 4;          // attention heads
  double mlp_ratio = 4.0; // feed-forward expansion
  int p = 8;              // patch size
  int m = 4;              // encoder depth
  int n = 4;              // decoder depth
  int res = 64;           // input resolution (height == width)

  int head_dim() const { return d / heads; }
  int grid() const { return res / p; }
  int tokens() const { return grid() * grid(); }
  void validate() const;
};

// ---------------------------------------------------------------------------
// Parameter bundles. Weights are (in x out); biases and norm vectors 1 x n.

struct LinearParams {
  Parameter* w = nullptr;
  Parameter* b = nullptr;
};
struct LayerNormParams {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;
};
struct AttentionParams {
  LinearParams q, k, v, o;
};
struct EncoderBlockParams {
  LayerNormParams ln1, ln2;
  AttentionParams attn;
  LinearParams fc1, fc2;
};
struct DecoderBlockParams {
  LayerNormParams ln_self, ln_query, ln_kv, ln_mlp;
  AttentionParams self_attn, cross_attn;
  LinearParams fc1, fc2;
};
struct PatchEmbedParams {
  LinearParams proj;
};
struct HeadParams {
  LayerNormParams norm;
  LinearParams out;
};

LinearParams make_linear(ParameterStore& s, const std::string& name, int in, int out);
LayerNormParams make_layer_norm(ParameterStore& s, const std::string& name, int d);
AttentionParams make_attention(ParameterStore& s, const std::string& name, int d);
EncoderBlockParams make_encoder_block(ParameterStore& s, const std::string& name,
                                      const BlockConfig& cfg);
DecoderBlockParams make_decoder_block(ParameterStore& s, const std::string& name,
                                      const BlockConfig& cfg);
PatchEmbedParams make_patch_embed(ParameterStore& s, const std::string& name, int channels,
                                  const BlockConfig& cfg);
HeadParams make_head(ParameterStore& s, const std::string& name, int out_channels,
                     const BlockConfig& cfg);

// ---------------------------------------------------------------------------
// Patch layout. Token t covers grid cell (t / grid_cols, t % grid_cols); its
// row stores channels as planar blocks of p*p values, pixel j = pr * p + pc
// within the patch, channel ch at column ch * p * p + j.

Eigen::MatrixXd image_patch_matrix(const Image& image, int p);
/// Invalid points are zero-filled before patch extraction.
Eigen::MatrixXd pointmap_patch_matrix(const Pointmap& pm, int p);
/// Extracts channel `ch` of a T x (C p^2) raw head output into an H x W grid.
Eigen::MatrixXd unpatchify_channel(const Eigen::MatrixXd& raw, int p, int grid_rows,
                                   int grid_cols, int channel);
/// Fixed 2D sinusoidal position codes, (grid_rows*grid_cols) x d.
Eigen::MatrixXd sinusoidal_position_codes(int grid_rows, int grid_cols, int d);

// ---------------------------------------------------------------------------
// Graph-building blocks.

Value linear(Graph& g, const LinearParams& p, Value x);
Value layer_norm(Graph& g, const LayerNormParams& p, Value x);

/// Multi-head scaled dot-product attention. Self-attention is q_in == kv_in.
Value attention(Graph& g, const AttentionParams& p, int heads, Value q_in, Value kv_in);

/// Pre-norm residual encoder block: x + attn(norm(x)), then + mlp(norm(.)).
Value encoder_block(Graph& g, const EncoderBlockParams& p, int heads, Value x);

/// Decoder block with multi-view cross-attention: self-attention on x, then
/// one shared cross-attention applied against each support independently,
/// aggregated by elementwise max (after the output projection, before the
/// residual add), then the feed-forward. With a single support this reduces
/// to a standard two-view decoder block.
Value multiview_decoder_block(Graph& g, const DecoderBlockParams& p, int heads, Value x,
                              std::span<const Value> supports);

/// Patch embedding with fixed sinusoidal position codes added.
Value patch_embed(Graph& g, const PatchEmbedParams& p, const Eigen::MatrixXd& patch_matrix,
                  int grid_rows, int grid_cols, int d, bool position_codes);

/// Linear head: norm + projection to out_channels * p^2 per token.
Value head_raw(Graph& g, const HeadParams& p, Value tokens);

// ---------------------------------------------------------------------------
// Map-level convenience wrappers (single forward pass, no gradients).

TokenGrid patchify_image(const Image& image, int p, const PatchEmbedParams& params, int d);
TokenGrid attention_tokens(const TokenGrid& q, const TokenGrid& kv, const AttentionParams& params,
                           int heads);
TokenGrid encoder_block_tokens(const TokenGrid& x, const EncoderBlockParams& params, int heads);
TokenGrid multiview_decoder_block_tokens(const TokenGrid& x, std::span<const TokenGrid> supports,
                                         const DecoderBlockParams& params, int heads);

struct HeadMaps {
  Pointmap points;      // validity all true; filtering happens downstream
  ConfidenceMap conf;   // 1 + exp(raw), raw clamped at 30
};

/// Converts a T x (4 p^2) raw head output into pointmap + confidence.
HeadMaps head_to_maps(const Eigen::MatrixXd& raw, int p, int grid_rows, int grid_cols);

/// regression_head operation on token level: head_raw + head_to_maps.
HeadMaps regression_head(const TokenGrid& tokens, const HeadParams& params, int p);

/// Confidence activation used by every head.
inline double confidence_activation(double raw) { return 1.0 + std::exp(std::min(raw, 30.0)); }

// ---------------------------------------------------------------------------
// Gradient checking.

/// Compares reverse-mode gradients against central differences on a random
/// subsample of at least min_coords coordinates (all coordinates if the
/// tensors are smaller). `loss` must recompute the scalar objective from the
/// current tensor values; when `with_grad` is true it must also accumulate
/// analytic gradients into each Parameter::grad.
/// Returns the maximum relative error with denominator
/// max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<double(bool with_grad)>& loss,
                  std::span<Parameter* const> tensors, double eps = 1e-5, int min_coords = 64,
                  std::uint64_t seed = 0);

}  // namespace framefuse::nn
