#include "framefuse/nn/graph.hpp"

#include <cmath>
#include <memory>

#include "framefuse/nn/params.hpp"

namespace framefuse::nn {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw InputError(std::string("shape error: ") + what);
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

Node* Graph::make(Eigen::MatrixXd value) {
  nodes_.emplace_back();
  Node& n = nodes_.back();
  n.value = std::move(value);
  if (grad_enabled_) n.grad = Eigen::MatrixXd::Zero(n.value.rows(), n.value.cols());
  return &n;
}

Value Graph::constant(Eigen::MatrixXd m) {
  Node* n = make(std::move(m));
  n->grad.resize(0, 0);  // constants never receive gradients
  return {n};
}

Value Graph::input(Eigen::MatrixXd m) { return {make(std::move(m))}; }

Value Graph::param(Parameter& p) {
  auto it = param_cache_.find(&p);
  if (it != param_cache_.end()) return {it->second};
  Node* n = make(p.value);
  if (!params_trainable_) n->grad.resize(0, 0);
  param_cache_.emplace(&p, n);
  if (grad_enabled_ && params_trainable_) param_nodes_.emplace_back(&p, n);
  return {n};
}

// Gradient flows into a node only when it has a grad slot; constants and
// frozen parameters drop it.
#define FF_GRAD(n) ((n)->grad.size() > 0)

Value Graph::matmul(Value a, Value b) {
  require(a.cols() == b.rows(), "matmul inner dimensions differ");
  Node* out = make(a.node->value * b.node->value);
  if (grad_enabled_) {
    Node *na = a.node, *nb = b.node, *no = out;
    out->backward = [na, nb, no] {
      if (FF_GRAD(na)) na->grad.noalias() += no->grad * nb->value.transpose();
      if (FF_GRAD(nb)) nb->grad.noalias() += na->value.transpose() * no->grad;
    };
  }
  return {out};
}

Value Graph::matmul_nt(Value a, Value b) {
  require(a.cols() == b.cols(), "matmul_nt inner dimensions differ");
  Node* out = make(a.node->value * b.node->value.transpose());
  if (grad_enabled_) {
    Node *na = a.node, *nb = b.node, *no = out;
    out->backward = [na, nb, no] {
      if (FF_GRAD(na)) na->grad.noalias() += no->grad * nb->value;
      if (FF_GRAD(nb)) nb->grad.noalias() += no->grad.transpose() * na->value;
    };
  }
  return {out};
}

Value Graph::add(Value a, Value b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add operand shapes differ");
  Node* out = make(a.node->value + b.node->value);
  if (grad_enabled_) {
    Node *na = a.node, *nb = b.node, *no = out;
    out->backward = [na, nb, no] {
      if (FF_GRAD(na)) na->grad += no->grad;
      if (FF_GRAD(nb)) nb->grad += no->grad;
    };
  }
  return {out};
}

Value Graph::sub(Value a, Value b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub operand shapes differ");
  Node* out = make(a.node->value - b.node->value);
  if (grad_enabled_) {
    Node *na = a.node, *nb = b.node, *no = out;
    out->backward = [na, nb, no] {
      if (FF_GRAD(na)) na->grad += no->grad;
      if (FF_GRAD(nb)) nb->grad -= no->grad;
    };
  }
  return {out};
}

Value Graph::add_rowvec(Value a, Value v) {
  require(v.rows() == 1 && v.cols() == a.cols(), "add_rowvec needs a 1 x cols vector");
  Node* out = make(a.node->value.rowwise() + v.node->value.row(0));
  if (grad_enabled_) {
    Node *na = a.node, *nv = v.node, *no = out;
    out->backward = [na, nv, no] {
      if (FF_GRAD(na)) na->grad += no->grad;
      if (FF_GRAD(nv)) nv->grad.row(0) += no->grad.colwise().sum();
    };
  }
  return {out};
}

Value Graph::cmul(Value a, Value b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "cmul operand shapes differ");
  Node* out = make(a.node->value.cwiseProduct(b.node->value));
  if (grad_enabled_) {
    Node *na = a.node, *nb = b.node, *no = out;
    out->backward = [na, nb, no] {
      if (FF_GRAD(na)) na->grad.array() += no->grad.array() * nb->value.array();
      if (FF_GRAD(nb)) nb->grad.array() += no->grad.array() * na->value.array();
    };
  }
  return {out};
}

Value Graph::scale(Value a, double s) {
  Node* out = make(a.node->value * s);
  if (grad_enabled_) {
    Node *na = a.node, *no = out;
    out->backward = [na, no, s] {
      if (FF_GRAD(na)) na->grad += s * no->grad;
    };
  }
  return {out};
}

Value Graph::add_const(Value a, double c) {
  Node* out = make(a.node->value.array() + c);
  if (grad_enabled_) {
    Node *na = a.node, *no = out;
    out->backward = [na, no] {
      if (FF_GRAD(na)) na->grad += no->grad;
    };
  }
  return {out};
}

Value Graph::mul_scalar(Value a, Value s) {
  require(s.rows() == 1 && s.cols() == 1, "mul_scalar needs a 1 x 1 scalar");
  double sv = s.scalar();
  Node* out = make(a.node->value * sv);
  if (grad_enabled_) {
    Node *na = a.node, *ns = s.node, *no = out;
    out->backward = [na, ns, no, sv] {
      if (FF_GRAD(na)) na->grad += sv * no->grad;
      if (FF_GRAD(ns)) ns->grad(0, 0) += (no->grad.array() * na->value.array()).sum();
    };
  }
  return {out};
}

Value Graph::div_scalar(Value a, Value s) {
  require(s.rows() == 1 && s.cols() == 1, "div_scalar needs a 1 x 1 scalar");
  double sv = s.scalar();
  if (sv == 0.0) throw NumericError("div_scalar: division by zero");
  Node* out = make(a.node->value / sv);
  if (grad_enabled_) {
    Node *na = a.node, *ns = s.node, *no = out;
    out->backward = [na, ns, no, sv] {
      if (FF_GRAD(na)) na->grad += no->grad / sv;
      if (FF_GRAD(ns))
        ns->grad(0, 0) -= (no->grad.array() * no->value.array()).sum() / sv;
    };
  }
  return {out};
}

Value Graph::softmax_rows(Value a) {
  Eigen::MatrixXd y = a.node->value;
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    double m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  Node* out = make(std::move(y));
  if (grad_enabled_) {
    Node *na = a.node, *no = out;
    out->backward = [na, no] {
      if (!FF_GRAD(na)) return;
      for (Eigen::Index r = 0; r < no->value.rows(); ++r) {
        double dot = no->grad.row(r).dot(no->value.row(r));
        na->grad.row(r).array() +=
            no->value.row(r).array() * (no->grad.row(r).array() - dot);
      }
    };
  }
  return {out};
}

Value Graph::layer_norm(Value x, Value gain, Value bias) {
  const Eigen::Index d = x.cols();
  require(gain.rows() == 1 && gain.cols() == d, "layer_norm gain shape");
  require(bias.rows() == 1 && bias.cols() == d, "layer_norm bias shape");
  constexpr double kEps = 1e-5;

  const Eigen::MatrixXd& xv = x.node->value;
  Eigen::MatrixXd xhat(xv.rows(), d);
  Eigen::VectorXd inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    double mu = xv.row(r).mean();
    double var = (xv.row(r).array() - mu).square().mean();
    double inv = 1.0 / std::sqrt(var + kEps);
    inv_std(r) = inv;
    xhat.row(r) = (xv.row(r).array() - mu) * inv;
  }
  Eigen::MatrixXd y = (xhat.array().rowwise() * gain.node->value.row(0).array()).rowwise() +
                      bias.node->value.row(0).array();
  Node* out = make(std::move(y));
  if (grad_enabled_) {
    Node *nx = x.node, *ng = gain.node, *nb = bias.node, *no = out;
    auto xh = std::make_shared<Eigen::MatrixXd>(std::move(xhat));
    auto inv = std::make_shared<Eigen::VectorXd>(std::move(inv_std));
    out->backward = [nx, ng, nb, no, xh, inv] {
      if (FF_GRAD(nb)) nb->grad.row(0) += no->grad.colwise().sum();
      if (FF_GRAD(ng))
        ng->grad.row(0) += (no->grad.array() * xh->array()).colwise().sum().matrix();
      if (!FF_GRAD(nx)) return;
      const Eigen::Index d2 = no->value.cols();
      for (Eigen::Index r = 0; r < no->value.rows(); ++r) {
        Eigen::ArrayXd dxhat = no->grad.row(r).array() * ng->value.row(0).array();
        double m1 = dxhat.mean();
        double m2 = (dxhat * xh->row(r).transpose().array()).mean();
        nx->grad.row(r).array() +=
            (*inv)(r) * (dxhat - m1 - xh->row(r).transpose().array() * m2);
        (void)d2;
      }
    };
  }
  return {out};
}

Value Graph::gelu(Value a) {
  const Eigen::MatrixXd& x = a.node->value;
  Eigen::ArrayXXd phi(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) phi(i) = 0.5 * (1.0 + std::erf(x(i) * kInvSqrt2));
  Node* out = make((x.array() * phi).matrix());
  if (grad_enabled_) {
    Node *na = a.node, *no = out;
    auto cdf = std::make_shared<Eigen::ArrayXXd>(std::move(phi));
    out->backward = [na, no, cdf] {
      if (!FF_GRAD(na)) return;
      const Eigen::ArrayXXd& x2 = na->value.array();
      na->grad.array() +=
          no->grad.array() * (*cdf + x2 * (-0.5 * x2.square()).exp() * kInvSqrt2Pi);
    };
  }
  return {out};
}

Value Graph::exp_clamped(Value a, double max_input) {
  const Eigen::ArrayXXd& x = a.node->value.array();
  Node* out = make(x.min(max_input).exp().matrix());
  if (grad_enabled_) {
    Node *na = a.node, *no = out;
    out->backward = [na, no, max_input] {
      if (!FF_GRAD(na)) return;
      na->grad.array() += no->grad.array() * no->value.array() *
                          (na->value.array() < max_input).cast<double>();
    };
  }
  return {out};
}

Value Graph::log(Value a) {
  Node* out = make(a.node->value.array().log().matrix());
  if (grad_enabled_) {
    Node *na = a.node, *no = out;
    out->backward = [na, no] {
      if (FF_GRAD(na)) na->grad.array() += no->grad.array() / na->value.array();
    };
  }
  return {out};
}

Value Graph::logistic(Value a) {
  const Eigen::ArrayXXd& x = a.node->value.array();
  Eigen::ArrayXXd y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    double v = x(i);
    y(i) = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  Node* out = make(y.matrix());
  if (grad_enabled_) {
    Node *na = a.node, *no = out;
    out->backward = [na, no] {
      if (!FF_GRAD(na)) return;
      const Eigen::ArrayXXd& yv = no->value.array();
      na->grad.array() += no->grad.array() * yv * (1.0 - yv);
    };
  }
  return {out};
}

Value Graph::clamp_min(Value a, double floor) {
  Node* out = make(a.node->value.array().max(floor).matrix());
  if (grad_enabled_) {
    Node *na = a.node, *no = out;
    out->backward = [na, no, floor] {
      if (!FF_GRAD(na)) return;
      na->grad.array() +=
          no->grad.array() * (na->value.array() > floor).cast<double>();
    };
  }
  return {out};
}

Value Graph::col_block(Value a, int col0, int ncols) {
  require(col0 >= 0 && ncols >= 0 && col0 + ncols <= a.cols(), "col_block out of range");
  Node* out = make(a.node->value.middleCols(col0, ncols));
  if (grad_enabled_) {
    Node *na = a.node, *no = out;
    out->backward = [na, no, col0, ncols] {
      if (FF_GRAD(na)) na->grad.middleCols(col0, ncols) += no->grad;
    };
  }
  return {out};
}

Value Graph::concat_cols(std::span<const Value> parts) {
  require(!parts.empty(), "concat_cols needs at least one part");
  Eigen::Index rows = parts[0].rows(), cols = 0;
  for (const Value& p : parts) {
    require(p.rows() == rows, "concat_cols row counts differ");
    cols += p.cols();
  }
  Eigen::MatrixXd y(rows, cols);
  Eigen::Index off = 0;
  for (const Value& p : parts) {
    y.middleCols(off, p.cols()) = p.node->value;
    off += p.cols();
  }
  Node* out = make(std::move(y));
  if (grad_enabled_) {
    std::vector<Node*> srcs;
    for (const Value& p : parts) srcs.push_back(p.node);
    Node* no = out;
    out->backward = [srcs, no] {
      Eigen::Index off2 = 0;
      for (Node* s : srcs) {
        if (FF_GRAD(s)) s->grad += no->grad.middleCols(off2, s->value.cols());
        off2 += s->value.cols();
      }
    };
  }
  return {out};
}

Value Graph::cwise_max(std::span<const Value> xs) {
  require(!xs.empty(), "cwise_max needs at least one input");
  Eigen::MatrixXd y = xs[0].node->value;
  for (std::size_t i = 1; i < xs.size(); ++i) {
    require(xs[i].rows() == y.rows() && xs[i].cols() == y.cols(), "cwise_max shapes differ");
    y = y.cwiseMax(xs[i].node->value);
  }
  Node* out = make(std::move(y));
  if (grad_enabled_) {
    std::vector<Node*> srcs;
    for (const Value& x : xs) srcs.push_back(x.node);
    Node* no = out;
    // Ties route the gradient to the first input attaining the maximum.
    out->backward = [srcs, no] {
      Eigen::ArrayXXd open = Eigen::ArrayXXd::Ones(no->value.rows(), no->value.cols());
      for (Node* s : srcs) {
        Eigen::ArrayXXd sel = (s->value.array() == no->value.array()).cast<double>() * open;
        if (FF_GRAD(s)) s->grad.array() += no->grad.array() * sel;
        open -= sel;
      }
    };
  }
  return {out};
}

Value Graph::group_norms(Value a, int groups) {
  require(groups > 0 && a.cols() % groups == 0, "group_norms: cols not divisible by groups");
  const Eigen::Index m = a.cols() / groups;
  const Eigen::MatrixXd& x = a.node->value;
  Eigen::ArrayXXd sq = Eigen::ArrayXXd::Zero(x.rows(), m);
  for (int g = 0; g < groups; ++g) sq += x.middleCols(g * m, m).array().square();
  Node* out = make(sq.sqrt().matrix());
  if (grad_enabled_) {
    Node *na = a.node, *no = out;
    out->backward = [na, no, groups, m] {
      if (!FF_GRAD(na)) return;
      Eigen::ArrayXXd inv = (no->value.array() > 0).select(no->value.array().inverse(),
                                                           Eigen::ArrayXXd::Zero(no->value.rows(), m));
      Eigen::ArrayXXd coeff = no->grad.array() * inv;
      for (int g = 0; g < groups; ++g)
        na->grad.middleCols(g * m, m).array() += coeff * na->value.middleCols(g * m, m).array();
    };
  }
  return {out};
}

Value Graph::sum(Value a) {
  Eigen::MatrixXd y(1, 1);
  y(0, 0) = a.node->value.sum();
  Node* out = make(std::move(y));
  if (grad_enabled_) {
    Node *na = a.node, *no = out;
    out->backward = [na, no] {
      if (FF_GRAD(na)) na->grad.array() += no->grad(0, 0);
    };
  }
  return {out};
}

Value Graph::masked_sum(Value a, const Eigen::MatrixXd& mask) {
  require(mask.rows() == a.rows() && mask.cols() == a.cols(), "masked_sum mask shape differs");
  Eigen::MatrixXd y(1, 1);
  y(0, 0) = (a.node->value.array() * mask.array()).sum();
  Node* out = make(std::move(y));
  if (grad_enabled_) {
    Node *na = a.node, *no = out;
    auto m = std::make_shared<Eigen::MatrixXd>(mask);
    out->backward = [na, no, m] {
      if (FF_GRAD(na)) na->grad.array() += no->grad(0, 0) * m->array();
    };
  }
  return {out};
}

Value Graph::mean_all(Value a) {
  require(a.node->value.size() > 0, "mean_all of an empty matrix");
  Eigen::MatrixXd y(1, 1);
  y(0, 0) = a.node->value.mean();
  Node* out = make(std::move(y));
  if (grad_enabled_) {
    Node *na = a.node, *no = out;
    double inv = 1.0 / static_cast<double>(a.node->value.size());
    out->backward = [na, no, inv] {
      if (FF_GRAD(na)) na->grad.array() += no->grad(0, 0) * inv;
    };
  }
  return {out};
}

void Graph::backward(Value loss) {
  if (!grad_enabled_) throw InputError("backward on a gradient-disabled graph");
  require(loss.rows() == 1 && loss.cols() == 1, "backward needs a scalar loss");
  loss.node->grad(0, 0) += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
    if (it->backward) it->backward();
}

void Graph::accumulate_param_grads(double scale) {
  for (auto& [p, node] : param_nodes_) p->grad += scale * node->grad;
}

}  // namespace framefuse::nn
