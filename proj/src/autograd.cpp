#include "tsn/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tsn/kernels.hpp"

namespace tsn::ag {

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape());
  return grad;
}

void Node::accumulate(const Tensor& g) { grad_buffer().add_(g); }

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return node;
}

Var parameter(Tensor value) {
  auto node = constant(std::move(value));
  node->requires_grad = true;
  return node;
}

void Tape::backward(const Var& output, const Tensor& seed) {
  require_shape(seed, output->value.shape(), "backward seed");
  output->accumulate(seed);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
}

namespace {

bool tracks(const Var& v) { return v && v->requires_grad; }

template <class... Vs>
bool any_tracks(const Vs&... vs) {
  return (tracks(vs) || ...);
}

Var make_output(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

/// Records `fn` only when gradients are wanted; fn runs only if the output
/// actually received a gradient.
template <class Fn>
void record(Tape* tape, const Var& out, Fn fn) {
  if (!tape || !out->requires_grad) return;
  tape->record([out, fn = std::move(fn)]() mutable {
    if (out->grad.empty()) return;
    fn(out->grad);
  });
}

}  // namespace

Var conv2d(Tape* tape, const Var& x, const Var& weight, const Var& bias) {
  Tensor y = kernels::conv2d_forward(x->value, weight->value, bias ? bias->value : Tensor());
  auto out = make_output(std::move(y), any_tracks(x, weight, bias));
  record(tape, out, [x, weight, bias](const Tensor& g) {
    kernels::conv2d_backward(x->value, weight->value, g, tracks(x) ? &x->grad_buffer() : nullptr,
                             tracks(weight) ? &weight->grad_buffer() : nullptr,
                             tracks(bias) ? &bias->grad_buffer() : nullptr);
  });
  return out;
}

Var relu(Tape* tape, const Var& x) {
  Tensor y = x->value;
  for (auto& v : y.vec()) v = v > 0.0 ? v : 0.0;
  auto out = make_output(std::move(y), tracks(x));
  record(tape, out, [x](const Tensor& g) {
    Tensor& dx = x->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x->value[i] > 0.0) dx[i] += g[i];
    }
  });
  return out;
}

Var sigmoid(Tape* tape, const Var& x) {
  Tensor y = x->value;
  for (auto& v : y.vec()) v = 1.0 / (1.0 + std::exp(-v));
  auto out = make_output(std::move(y), tracks(x));
  std::weak_ptr<Node> weak = out;
  record(tape, out, [x, weak](const Tensor& g) {
    const auto self = weak.lock();
    Tensor& dx = x->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double p = self->value[i];
      dx[i] += g[i] * p * (1.0 - p);
    }
  });
  return out;
}

Var maxpool2(Tape* tape, const Var& x) {
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  Tensor y = kernels::maxpool2_forward(x->value, *argmax);
  auto out = make_output(std::move(y), tracks(x));
  record(tape, out, [x, argmax](const Tensor& g) {
    kernels::maxpool2_backward(g, *argmax, x->grad_buffer());
  });
  return out;
}

Var avgpool(Tape* tape, const Var& x, int factor) {
  if (factor == 1) return x;
  auto out = make_output(kernels::avgpool_forward(x->value, factor), tracks(x));
  record(tape, out, [x, factor](const Tensor& g) {
    kernels::avgpool_backward(g, factor, x->grad_buffer());
  });
  return out;
}

Var add(Tape* tape, const Var& a, const Var& b) {
  if (!(a->value.shape() == b->value.shape())) {
    throw DimensionError("add: " + a->value.shape().str() + " vs " + b->value.shape().str());
  }
  Tensor y = a->value;
  y.add_(b->value);
  auto out = make_output(std::move(y), any_tracks(a, b));
  record(tape, out, [a, b](const Tensor& g) {
    if (tracks(a)) a->accumulate(g);
    if (tracks(b)) b->accumulate(g);
  });
  return out;
}

Var concat_channels(Tape* tape, const Var& a, const Var& b) {
  const Shape sa = a->value.shape(), sb = b->value.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw DimensionError("concat: " + sa.str() + " vs " + sb.str());
  }
  Tensor y({sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t pa = static_cast<std::size_t>(sa.c) * sa.plane();
  const std::size_t pb = static_cast<std::size_t>(sb.c) * sb.plane();
  for (int s = 0; s < sa.n; ++s) {
    std::copy_n(a->value.plane(s, 0), pa, y.plane(s, 0));
    std::copy_n(b->value.plane(s, 0), pb, y.plane(s, sa.c));
  }
  auto out = make_output(std::move(y), any_tracks(a, b));
  record(tape, out, [a, b, pa, pb, ca = sa.c](const Tensor& g) {
    for (int s = 0; s < g.n(); ++s) {
      if (tracks(a)) {
        double* da = a->grad_buffer().plane(s, 0);
        const double* ga = g.plane(s, 0);
        for (std::size_t i = 0; i < pa; ++i) da[i] += ga[i];
      }
      if (tracks(b)) {
        double* db = b->grad_buffer().plane(s, 0);
        const double* gb = g.plane(s, ca);
        for (std::size_t i = 0; i < pb; ++i) db[i] += gb[i];
      }
    }
  });
  return out;
}

Var resize_bilinear(Tape* tape, const Var& x, int out_h, int out_w) {
  auto out = make_output(kernels::resize_bilinear(x->value, out_h, out_w), tracks(x));
  record(tape, out, [x](const Tensor& g) { kernels::resize_bilinear_backward(g, x->grad_buffer()); });
  return out;
}

Var reshape(Tape* tape, const Var& x, Shape shape) {
  auto out = make_output(x->value.reshaped(shape), tracks(x));
  record(tape, out, [x](const Tensor& g) {
    Tensor& dx = x->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
  return out;
}

Var scale(Tape* tape, const Var& x, double factor) {
  Tensor y = x->value;
  for (auto& v : y.vec()) v *= factor;
  auto out = make_output(std::move(y), tracks(x));
  record(tape, out, [x, factor](const Tensor& g) {
    Tensor& dx = x->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * factor;
  });
  return out;
}

namespace {

void check_matrix(const Tensor& t, const char* what) {
  if (t.c() != 1) throw DimensionError(std::string(what) + ": expected (n,1,r,c), got " + t.shape().str());
}

const double* mat(const Tensor& t, int s) { return t.plane(t.n() == 1 ? 0 : s, 0); }
double* mat(Tensor& t, int s) { return t.plane(t.n() == 1 ? 0 : s, 0); }

}  // namespace

Var matmul(Tape* tape, const Var& a, const Var& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  check_matrix(av, "matmul lhs");
  check_matrix(bv, "matmul rhs");
  if (av.w() != bv.h() || (bv.n() != av.n() && bv.n() != 1)) {
    throw DimensionError("matmul: " + av.shape().str() + " x " + bv.shape().str());
  }
  const int r = av.h(), k = av.w(), c = bv.w();
  Tensor y({av.n(), 1, r, c});
  for (int s = 0; s < av.n(); ++s) kernels::gemm_nn(r, c, k, av.plane(s, 0), mat(bv, s), y.plane(s, 0), false);
  auto out = make_output(std::move(y), any_tracks(a, b));
  record(tape, out, [a, b, r, k, c](const Tensor& g) {
    for (int s = 0; s < g.n(); ++s) {
      if (tracks(a)) kernels::gemm_nt(r, k, c, g.plane(s, 0), mat(b->value, s), a->grad_buffer().plane(s, 0), true);
      if (tracks(b)) kernels::gemm_tn(k, c, r, a->value.plane(s, 0), g.plane(s, 0), mat(b->grad_buffer(), s), true);
    }
  });
  return out;
}

Var matmul_nt(Tape* tape, const Var& a, const Var& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  check_matrix(av, "matmul_nt lhs");
  check_matrix(bv, "matmul_nt rhs");
  if (av.w() != bv.w() || bv.n() != av.n()) {
    throw DimensionError("matmul_nt: " + av.shape().str() + " x " + bv.shape().str() + "^T");
  }
  const int r = av.h(), k = av.w(), c = bv.h();
  Tensor y({av.n(), 1, r, c});
  for (int s = 0; s < av.n(); ++s) kernels::gemm_nt(r, c, k, av.plane(s, 0), bv.plane(s, 0), y.plane(s, 0), false);
  auto out = make_output(std::move(y), any_tracks(a, b));
  record(tape, out, [a, b, r, k, c](const Tensor& g) {
    for (int s = 0; s < g.n(); ++s) {
      // dA = G·B, dB = Gᵀ·A
      if (tracks(a)) kernels::gemm_nn(r, k, c, g.plane(s, 0), b->value.plane(s, 0), a->grad_buffer().plane(s, 0), true);
      if (tracks(b)) kernels::gemm_tn(c, k, r, g.plane(s, 0), a->value.plane(s, 0), b->grad_buffer().plane(s, 0), true);
    }
  });
  return out;
}

Var softmax_rows(Tape* tape, const Var& x) {
  Tensor y = x->value;
  const int cols = y.w();
  const std::size_t rows = y.size() / static_cast<std::size_t>(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = y.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int j = 0; j < cols; ++j) row[j] /= sum;
  }
  auto out = make_output(std::move(y), tracks(x));
  std::weak_ptr<Node> weak = out;
  record(tape, out, [x, weak, rows, cols](const Tensor& g) {
    const auto self = weak.lock();
    Tensor& dx = x->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = self->value.data() + r * cols;
      const double* gr = g.data() + r * cols;
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += gr[j] * p[j];
      double* d = dx.data() + r * cols;
      for (int j = 0; j < cols; ++j) d[j] += p[j] * (gr[j] - dot);
    }
  });
  return out;
}

Var global_avgpool(Tape* tape, const Var& x) {
  const Shape s = x->value.shape();
  Tensor y({s.n, s.c, 1, 1});
  const double inv = 1.0 / static_cast<double>(s.plane());
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* p = x->value.plane(n, c);
      double acc = 0.0;
      for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
      y.at(n, c, 0, 0) = acc * inv;
    }
  }
  auto out = make_output(std::move(y), tracks(x));
  record(tape, out, [x, inv](const Tensor& g) {
    Tensor& dx = x->grad_buffer();
    const std::size_t plane = dx.shape().plane();
    for (int n = 0; n < dx.n(); ++n) {
      for (int c = 0; c < dx.c(); ++c) {
        const double v = g.at(n, c, 0, 0) * inv;
        double* p = dx.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) p[i] += v;
      }
    }
  });
  return out;
}

Var channel_scale(Tape* tape, const Var& x, const Var& gate) {
  const Shape s = x->value.shape();
  require_shape(gate->value, {s.n, s.c, 1, 1}, "channel_scale gate");
  Tensor y = x->value;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double gv = gate->value.at(n, c, 0, 0);
      double* p = y.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) p[i] *= gv;
    }
  }
  auto out = make_output(std::move(y), any_tracks(x, gate));
  record(tape, out, [x, gate](const Tensor& g) {
    const Shape s = x->value.shape();
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const double* gp = g.plane(n, c);
        const double* xp = x->value.plane(n, c);
        const double gv = gate->value.at(n, c, 0, 0);
        if (tracks(x)) {
          double* dp = x->grad_buffer().plane(n, c);
          for (std::size_t i = 0; i < s.plane(); ++i) dp[i] += gp[i] * gv;
        }
        if (tracks(gate)) {
          double acc = 0.0;
          for (std::size_t i = 0; i < s.plane(); ++i) acc += gp[i] * xp[i];
          gate->grad_buffer().at(n, c, 0, 0) += acc;
        }
      }
    }
  });
  return out;
}

namespace {

// Shared normalization backward: given xhat, dy and the affine scale for each
// element of one normalization group, accumulate dx, dgamma, dbeta.
struct NormGroupStats {
  double mean;
  double inv_std;
};

}  // namespace

Var batch_norm(Tape* tape, const Var& x, const Var& gamma, const Var& beta, NormBuffers buffers,
               bool training, double momentum, double eps) {
  const Shape s = x->value.shape();
  require_shape(gamma->value, {1, s.c, 1, 1}, "batch_norm gamma");
  require_shape(beta->value, {1, s.c, 1, 1}, "batch_norm beta");
  const std::size_t plane = s.plane();
  const double count = static_cast<double>(s.n) * static_cast<double>(plane);
  auto stats = std::make_shared<std::vector<NormGroupStats>>(static_cast<std::size_t>(s.c));

  for (int c = 0; c < s.c; ++c) {
    double mean = 0.0, var = 0.0;
    if (training) {
      for (int n = 0; n < s.n; ++n) {
        const double* p = x->value.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) mean += p[i];
      }
      mean /= count;
      for (int n = 0; n < s.n; ++n) {
        const double* p = x->value.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) var += (p[i] - mean) * (p[i] - mean);
      }
      var /= count;
      if (buffers.running_mean && buffers.running_var) {
        const double unbiased = count > 1 ? var * count / (count - 1.0) : var;
        auto& rm = (*buffers.running_mean)[static_cast<std::size_t>(c)];
        auto& rv = (*buffers.running_var)[static_cast<std::size_t>(c)];
        rm = (1.0 - momentum) * rm + momentum * mean;
        rv = (1.0 - momentum) * rv + momentum * unbiased;
      }
    } else {
      mean = (*buffers.running_mean)[static_cast<std::size_t>(c)];
      var = (*buffers.running_var)[static_cast<std::size_t>(c)];
    }
    (*stats)[static_cast<std::size_t>(c)] = {mean, 1.0 / std::sqrt(var + eps)};
  }

  Tensor y(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const auto st = (*stats)[static_cast<std::size_t>(c)];
      const double gm = gamma->value[static_cast<std::size_t>(c)];
      const double bt = beta->value[static_cast<std::size_t>(c)];
      const double* p = x->value.plane(n, c);
      double* q = y.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) q[i] = gm * (p[i] - st.mean) * st.inv_std + bt;
    }
  }

  auto out = make_output(std::move(y), any_tracks(x, gamma, beta));
  record(tape, out, [x, gamma, beta, stats, training, plane, count](const Tensor& g) {
    const Shape s = x->value.shape();
    for (int c = 0; c < s.c; ++c) {
      const auto st = (*stats)[static_cast<std::size_t>(c)];
      double sum_g = 0.0, sum_gx = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const double* gp = g.plane(n, c);
        const double* xp = x->value.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          sum_g += gp[i];
          sum_gx += gp[i] * (xp[i] - st.mean) * st.inv_std;
        }
      }
      if (tracks(gamma)) gamma->grad_buffer()[static_cast<std::size_t>(c)] += sum_gx;
      if (tracks(beta)) beta->grad_buffer()[static_cast<std::size_t>(c)] += sum_g;
      if (!tracks(x)) continue;
      const double gm = gamma->value[static_cast<std::size_t>(c)];
      for (int n = 0; n < s.n; ++n) {
        const double* gp = g.plane(n, c);
        const double* xp = x->value.plane(n, c);
        double* dp = x->grad_buffer().plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          if (training) {
            const double xhat = (xp[i] - st.mean) * st.inv_std;
            dp[i] += gm * st.inv_std * (gp[i] - sum_g / count - xhat * sum_gx / count);
          } else {
            dp[i] += gm * st.inv_std * gp[i];
          }
        }
      }
    }
  });
  return out;
}

Var group_norm(Tape* tape, const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
  const Shape s = x->value.shape();
  if (groups < 1 || s.c % groups != 0) {
    throw DimensionError("group_norm: " + std::to_string(s.c) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
  }
  require_shape(gamma->value, {1, s.c, 1, 1}, "group_norm gamma");
  require_shape(beta->value, {1, s.c, 1, 1}, "group_norm beta");
  const int per = s.c / groups;
  const std::size_t plane = s.plane();
  const double count = static_cast<double>(per) * static_cast<double>(plane);
  auto stats = std::make_shared<std::vector<NormGroupStats>>(static_cast<std::size_t>(s.n) * groups);

  Tensor y(s);
  for (int n = 0; n < s.n; ++n) {
    for (int gi = 0; gi < groups; ++gi) {
      double mean = 0.0, var = 0.0;
      for (int c = gi * per; c < (gi + 1) * per; ++c) {
        const double* p = x->value.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) mean += p[i];
      }
      mean /= count;
      for (int c = gi * per; c < (gi + 1) * per; ++c) {
        const double* p = x->value.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) var += (p[i] - mean) * (p[i] - mean);
      }
      var /= count;
      const NormGroupStats st{mean, 1.0 / std::sqrt(var + eps)};
      (*stats)[static_cast<std::size_t>(n) * groups + gi] = st;
      for (int c = gi * per; c < (gi + 1) * per; ++c) {
        const double gm = gamma->value[static_cast<std::size_t>(c)];
        const double bt = beta->value[static_cast<std::size_t>(c)];
        const double* p = x->value.plane(n, c);
        double* q = y.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) q[i] = gm * (p[i] - st.mean) * st.inv_std + bt;
      }
    }
  }

  auto out = make_output(std::move(y), any_tracks(x, gamma, beta));
  record(tape, out, [x, gamma, beta, stats, groups, per, plane, count](const Tensor& g) {
    const Shape s = x->value.shape();
    for (int n = 0; n < s.n; ++n) {
      for (int gi = 0; gi < groups; ++gi) {
        const auto st = (*stats)[static_cast<std::size_t>(n) * groups + gi];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int c = gi * per; c < (gi + 1) * per; ++c) {
          const double gm = gamma->value[static_cast<std::size_t>(c)];
          const double* gp = g.plane(n, c);
          const double* xp = x->value.plane(n, c);
          double sg = 0.0, sgx = 0.0;
          for (std::size_t i = 0; i < plane; ++i) {
            const double xhat = (xp[i] - st.mean) * st.inv_std;
            sg += gp[i];
            sgx += gp[i] * xhat;
          }
          if (tracks(gamma)) gamma->grad_buffer()[static_cast<std::size_t>(c)] += sgx;
          if (tracks(beta)) beta->grad_buffer()[static_cast<std::size_t>(c)] += sg;
          sum_dxhat += gm * sg;
          sum_dxhat_xhat += gm * sgx;
        }
        if (!tracks(x)) continue;
        for (int c = gi * per; c < (gi + 1) * per; ++c) {
          const double gm = gamma->value[static_cast<std::size_t>(c)];
          const double* gp = g.plane(n, c);
          const double* xp = x->value.plane(n, c);
          double* dp = x->grad_buffer().plane(n, c);
          for (std::size_t i = 0; i < plane; ++i) {
            const double xhat = (xp[i] - st.mean) * st.inv_std;
            dp[i] += st.inv_std * (gm * gp[i] - sum_dxhat / count - xhat * sum_dxhat_xhat / count);
          }
        }
      }
    }
  });
  return out;
}

}  // namespace tsn::ag
