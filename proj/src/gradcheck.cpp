#include "spectr/gradcheck.hpp"

#include <cmath>
#include <functional>

#include "spectr/data.hpp"
#include "spectr/entmax.hpp"
#include "spectr/model.hpp"
#include "spectr/ops.hpp"
#include "spectr/reference.hpp"
#include "spectr/rng.hpp"
#include "spectr/train.hpp"

namespace spectr {

namespace {

double rel_err(double a, double b) {
  const double m = std::max(std::abs(a), std::abs(b));
  if (m < 1e-6) return 0.0;
  return std::abs(a - b) / m;
}

Tensor random_tensor(std::vector<int> shape, Rng& rng, double sigma = 1.0) {
  Tensor t(std::move(shape));
  for (size_t i = 0; i < t.size(); ++i)
    t.data()[i] = static_cast<float>(rng.normal(0.0, sigma));
  return t;
}

// One primitive check point: inputs -> op -> loss = sum(w * out). Analytic
// grads come from the tape; the oracle is a central difference of the same
// forward with the weighted sum accumulated in double. Elements where the
// h and h/2 quotients disagree sit on a kink and are skipped (the oracle,
// not the implementation, is invalid there).
double check_point(const std::function<Tensor(std::vector<Tensor>&)>& op,
                   std::vector<Tensor>& inputs, Rng& rng, double h) {
  for (auto& t : inputs) t.set_requires_grad(true);
  Tape::active().clear();
  Tensor out = op(inputs);
  Tensor w = random_tensor(out.shape(), rng);
  Tensor loss = sum_all(mul(out, w));
  Tape::active().backward(loss);

  auto loss_at = [&]() {
    NoGradGuard ng;
    Tensor o = op(inputs);
    double s = 0.0;
    for (size_t i = 0; i < o.size(); ++i)
      s += static_cast<double>(o.data()[i]) * w.data()[i];
    return s;
  };

  double worst = 0.0;
  for (auto& t : inputs) {
    const std::vector<float> analytic =
        t.grad_allocated() ? t.grad_vec() : std::vector<float>(t.size(), 0.0f);
    for (size_t i = 0; i < t.size(); ++i) {
      const float keep = t.data()[i];
      auto fd_at = [&](double step) {
        t.data()[i] = static_cast<float>(keep + step);
        const double up = loss_at();
        t.data()[i] = static_cast<float>(keep - step);
        const double dn = loss_at();
        t.data()[i] = keep;
        return (up - dn) / (2.0 * step);
      };
      const double fd = fd_at(h);
      const double fd2 = fd_at(h / 2);
      if (std::abs(fd - fd2) > 0.05 * std::max(std::abs(fd), std::abs(fd2)) + 1e-7)
        continue;  // kink inside the stencil
      worst = std::max(worst, rel_err(analytic[i], fd));
    }
  }
  Tape::active().clear();
  return worst;
}

GradCheckResult run_primitive(const std::string& name, double tol, double h, int points,
                              uint64_t seed,
                              const std::function<std::vector<Tensor>(Rng&)>& make_inputs,
                              const std::function<Tensor(std::vector<Tensor>&)>& op) {
  Rng rng(mix_seed(seed, fnv1a(name)));
  double worst = 0.0;
  for (int p = 0; p < points; ++p) {
    std::vector<Tensor> inputs = make_inputs(rng);
    worst = std::max(worst, check_point(op, inputs, rng, h));
  }
  return {name, worst, tol, worst < tol};
}

}  // namespace

std::vector<GradCheckResult> primitive_gradcheck(uint64_t seed) {
  std::vector<GradCheckResult> results;
  auto push = [&](GradCheckResult r) { results.push_back(std::move(r)); };

  push(run_primitive(
      "add", 1e-4, 1e-2, 20, seed,
      [](Rng& r) {
        return std::vector<Tensor>{random_tensor({3, 5}, r), random_tensor({3, 5}, r)};
      },
      [](std::vector<Tensor>& in) { return add(in[0], in[1]); }));
  push(run_primitive(
      "mul", 1e-4, 1e-2, 20, seed,
      [](Rng& r) {
        return std::vector<Tensor>{random_tensor({4, 4}, r), random_tensor({4, 4}, r)};
      },
      [](std::vector<Tensor>& in) { return mul(in[0], in[1]); }));
  push(run_primitive(
      "div", 1e-4, 3e-3, 20, seed,
      [](Rng& r) {
        Tensor a = random_tensor({4, 4}, r);
        Tensor b({4, 4});
        for (size_t i = 0; i < b.size(); ++i) {
          const double sign = r.uniform() < 0.5 ? -1.0 : 1.0;
          b.data()[i] = static_cast<float>(sign * r.uniform(0.5, 1.5));
        }
        return std::vector<Tensor>{a, b};
      },
      [](std::vector<Tensor>& in) { return div(in[0], in[1]); }));
  push(run_primitive(
      "add_scalar", 1e-4, 1e-2, 20, seed,
      [](Rng& r) { return std::vector<Tensor>{random_tensor({6}, r)}; },
      [](std::vector<Tensor>& in) { return add_scalar(in[0], 0.7f); }));
  push(run_primitive(
      "mul_scalar", 1e-4, 1e-2, 20, seed,
      [](Rng& r) { return std::vector<Tensor>{random_tensor({6}, r)}; },
      [](std::vector<Tensor>& in) { return mul_scalar(in[0], -1.3f); }));
  push(run_primitive(
      "relu", 1e-3, 1e-3, 20, seed,
      [](Rng& r) {
        Tensor t({5, 5});
        for (size_t i = 0; i < t.size(); ++i) {
          double v = r.normal();
          if (std::abs(v) < 1e-2) v += v >= 0 ? 1e-2 : -1e-2;  // kink margin
          t.data()[i] = static_cast<float>(v);
        }
        return std::vector<Tensor>{t};
      },
      [](std::vector<Tensor>& in) { return relu(in[0]); }));
  push(run_primitive(
      "sigmoid", 1e-4, 3e-3, 20, seed,
      [](Rng& r) { return std::vector<Tensor>{random_tensor({4, 3}, r)}; },
      [](std::vector<Tensor>& in) { return sigmoid(in[0]); }));
  push(run_primitive(
      "log", 1e-4, 1e-3, 20, seed,
      [](Rng& r) {
        Tensor t({8});
        for (size_t i = 0; i < t.size(); ++i)
          t.data()[i] = static_cast<float>(r.uniform(0.5, 2.0));
        return std::vector<Tensor>{t};
      },
      [](std::vector<Tensor>& in) { return log(in[0]); }));
  push(run_primitive(
      "clamp", 1e-3, 1e-3, 20, seed,
      [](Rng& r) {
        Tensor t({8});
        for (size_t i = 0; i < t.size(); ++i) {
          double v = r.normal();
          while (std::abs(std::abs(v) - 1.0) < 5e-2) v = r.normal();  // away from bounds
          t.data()[i] = static_cast<float>(v);
        }
        return std::vector<Tensor>{t};
      },
      [](std::vector<Tensor>& in) { return clamp(in[0], -1.0f, 1.0f); }));
  push(run_primitive(
      "add_rows", 1e-4, 1e-2, 20, seed,
      [](Rng& r) {
        return std::vector<Tensor>{random_tensor({3, 4, 5}, r), random_tensor({4, 5}, r)};
      },
      [](std::vector<Tensor>& in) { return add_rows(in[0], in[1]); }));
  push(run_primitive(
      "sum_all", 1e-4, 1e-2, 20, seed,
      [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 7}, r)}; },
      [](std::vector<Tensor>& in) { return sum_all(in[0]); }));
  push(run_primitive(
      "mean_all", 1e-4, 1e-2, 20, seed,
      [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 7}, r)}; },
      [](std::vector<Tensor>& in) { return mean_all(in[0]); }));
  push(run_primitive(
      "mean_axis0", 1e-4, 1e-2, 20, seed,
      [](Rng& r) { return std::vector<Tensor>{random_tensor({4, 3, 2}, r)}; },
      [](std::vector<Tensor>& in) { return mean_axis0(in[0]); }));
  push(run_primitive(
      "matmul", 1e-4, 1e-2, 20, seed,
      [](Rng& r) {
        return std::vector<Tensor>{random_tensor({3, 4}, r), random_tensor({4, 2}, r)};
      },
      [](std::vector<Tensor>& in) { return matmul(in[0], in[1]); }));
  push(run_primitive(
      "linear", 1e-4, 1e-2, 20, seed,
      [](Rng& r) {
        return std::vector<Tensor>{random_tensor({2, 3, 4}, r), random_tensor({4, 5}, r),
                                   random_tensor({5}, r)};
      },
      [](std::vector<Tensor>& in) { return linear(in[0], in[1], in[2]); }));
  push(run_primitive(
      "band_conv2d", 1e-4, 1e-2, 10, seed,
      [](Rng& r) {
        return std::vector<Tensor>{random_tensor({3, 4, 4, 2}, r),
                                   random_tensor({3, 2, 3, 3}, r), random_tensor({3}, r)};
      },
      [](std::vector<Tensor>& in) { return band_conv2d(in[0], in[1], in[2]); }));
  push(run_primitive(
      "band_conv2d_per_band", 1e-4, 1e-2, 10, seed,
      [](Rng& r) {
        return std::vector<Tensor>{random_tensor({3, 4, 4, 2}, r),
                                   random_tensor({3, 3, 2, 3, 3}, r), random_tensor({3}, r)};
      },
      [](std::vector<Tensor>& in) { return band_conv2d(in[0], in[1], in[2]); }));
  push(run_primitive(
      "conv3d", 1e-4, 1e-2, 10, seed,
      [](Rng& r) {
        return std::vector<Tensor>{random_tensor({3, 4, 4, 2}, r),
                                   random_tensor({3, 2, 3, 3, 3}, r), random_tensor({3}, r)};
      },
      [](std::vector<Tensor>& in) { return conv3d(in[0], in[1], in[2]); }));
  push(run_primitive(
      "maxpool3", 1e-3, 1e-3, 20, seed,
      [](Rng& r) {
        // spread values so window maxima are unambiguous at the step size
        Tensor t({3, 4, 4, 2});
        std::vector<int> order(t.size());
        for (size_t i = 0; i < t.size(); ++i) order[i] = static_cast<int>(i);
        shuffle(order, r);
        for (size_t i = 0; i < t.size(); ++i)
          t.data()[i] = static_cast<float>(order[i] * 0.05 + r.uniform(0.0, 0.02));
        return std::vector<Tensor>{t};
      },
      [](std::vector<Tensor>& in) { return maxpool3(in[0]); }));
  push(run_primitive(
      "upsample3", 1e-4, 1e-2, 10, seed,
      [](Rng& r) { return std::vector<Tensor>{random_tensor({2, 3, 3, 2}, r)}; },
      [](std::vector<Tensor>& in) { return upsample3(in[0]); }));
  push(run_primitive(
      "crop3", 1e-4, 1e-2, 10, seed,
      [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 4, 4, 2}, r)}; },
      [](std::vector<Tensor>& in) { return crop3(in[0], 2, 3, 3); }));
  push(run_primitive(
      "concat_channels", 1e-4, 1e-2, 10, seed,
      [](Rng& r) {
        return std::vector<Tensor>{random_tensor({2, 3, 3, 2}, r),
                                   random_tensor({2, 3, 3, 3}, r)};
      },
      [](std::vector<Tensor>& in) { return concat_channels(in[0], in[1]); }));
  push(run_primitive(
      "gather_sequences", 1e-4, 1e-2, 10, seed,
      [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 2, 2, 4}, r)}; },
      [](std::vector<Tensor>& in) { return gather_sequences(in[0]); }));
  push(run_primitive(
      "scatter_sequences", 1e-4, 1e-2, 10, seed,
      [](Rng& r) { return std::vector<Tensor>{random_tensor({6, 3, 4}, r)}; },
      [](std::vector<Tensor>& in) { return scatter_sequences(in[0], 2, 3); }));
  push(run_primitive(
      "layer_norm", 1e-4, 3e-3, 20, seed,
      [](Rng& r) {
        return std::vector<Tensor>{random_tensor({3, 4, 6}, r), random_tensor({6}, r),
                                   random_tensor({6}, r)};
      },
      [](std::vector<Tensor>& in) { return layer_norm(in[0], in[1], in[2]); }));
  push(run_primitive(
      "spectral_group_norm", 1e-4, 3e-3, 20, seed,
      [](Rng& r) {
        return std::vector<Tensor>{random_tensor({3, 2, 2, 8}, r), random_tensor({3, 8}, r),
                                   random_tensor({3, 8}, r)};
      },
      [](std::vector<Tensor>& in) {
        return spectral_group_norm(in[0], 3, in[1], in[2], 4);
      }));
  push(run_primitive(
      "alpha_from_raw", 1e-4, 3e-3, 20, seed,
      [](Rng& r) { return std::vector<Tensor>{random_tensor({4}, r)}; },
      [](std::vector<Tensor>& in) { return alpha_from_raw(in[0]); }));
  push(run_primitive(
      "multihead_attention_entmax", 1e-3, 1e-3, 10, seed,
      [](Rng& r) {
        return std::vector<Tensor>{random_tensor({2, 4, 4}, r, 0.5),
                                   random_tensor({2, 4, 4}, r, 0.5),
                                   random_tensor({2, 4, 4}, r, 0.5),
                                   random_tensor({2}, r, 0.5)};
      },
      [](std::vector<Tensor>& in) {
        Tensor alphas = alpha_from_raw(in[3]);
        return multihead_attention(in[0], in[1], in[2], 2, alphas);
      }));
  push(run_primitive(
      "multihead_attention_softmax", 1e-3, 1e-3, 10, seed,
      [](Rng& r) {
        return std::vector<Tensor>{random_tensor({2, 4, 4}, r, 0.5),
                                   random_tensor({2, 4, 4}, r, 0.5),
                                   random_tensor({2, 4, 4}, r, 0.5)};
      },
      [](std::vector<Tensor>& in) {
        return multihead_attention(in[0], in[1], in[2], 2, Tensor());
      }));
  return results;
}

namespace {

// random score vector whose entmax output sits away from a support boundary
std::vector<double> interior_point(Rng& rng, int n, double alpha, double margin) {
  for (int tries = 0; tries < 200; ++tries) {
    std::vector<double> x(static_cast<size_t>(n));
    for (auto& v : x) v = rng.normal();
    const EntmaxResult r = entmax_forward(x, alpha);
    bool ok = true;
    for (size_t i = 0; i < x.size(); ++i) {
      if (r.p[i] > 0.0 && r.p[i] < margin) ok = false;
      if (r.p[i] == 0.0 && (alpha - 1.0) * (x[i] - r.tau) > -margin) ok = false;
    }
    if (ok) return x;
  }
  return std::vector<double>(static_cast<size_t>(n), 0.0);
}

}  // namespace

GradCheckResult entmax_vjp_gradcheck(uint64_t seed, int points) {
  Rng rng(mix_seed(seed, fnv1a("entmax_vjp")));
  const double h = 1e-4;
  double worst = 0.0;
  for (int p = 0; p < points; ++p) {
    const int n = rng.uniform_int(2, 8);
    const double alpha = rng.uniform(1.05, 2.0);
    std::vector<double> x = interior_point(rng, n, alpha, 1e-3);
    std::vector<double> g(static_cast<size_t>(n));
    for (auto& v : g) v = rng.normal();
    const EntmaxResult r = entmax_forward(x, alpha);
    const std::vector<double> vjp = entmax_input_vjp(r, alpha, g);
    for (int i = 0; i < n; ++i) {
      const double keep = x[static_cast<size_t>(i)];
      x[static_cast<size_t>(i)] = keep + h;
      const auto up = entmax_forward(x, alpha);
      x[static_cast<size_t>(i)] = keep - h;
      const auto dn = entmax_forward(x, alpha);
      x[static_cast<size_t>(i)] = keep;
      double fd = 0.0;
      for (int j = 0; j < n; ++j)
        fd += g[static_cast<size_t>(j)] *
              (up.p[static_cast<size_t>(j)] - dn.p[static_cast<size_t>(j)]) / (2.0 * h);
      worst = std::max(worst, rel_err(vjp[static_cast<size_t>(i)], fd));
    }
  }
  return {"entmax_input_vjp", worst, 1e-4, worst < 1e-4};
}

GradCheckResult entmax_alpha_gradcheck(uint64_t seed, int points) {
  Rng rng(mix_seed(seed, fnv1a("entmax_alpha")));
  const double h = 1e-4;
  double worst = 0.0;
  for (int p = 0; p < points; ++p) {
    const int n = rng.uniform_int(2, 8);
    const double alpha = rng.uniform(1.1, 1.9);
    std::vector<double> x = interior_point(rng, n, alpha, 1e-3);
    std::vector<double> g(static_cast<size_t>(n));
    for (auto& v : g) v = rng.normal();
    const double grad = entmax_alpha_grad(x, alpha, g);
    const auto up = entmax_forward(x, alpha + h);
    const auto dn = entmax_forward(x, alpha - h);
    double fd = 0.0;
    for (int j = 0; j < n; ++j)
      fd += g[static_cast<size_t>(j)] *
            (up.p[static_cast<size_t>(j)] - dn.p[static_cast<size_t>(j)]) / (2.0 * h);
    worst = std::max(worst, rel_err(grad, fd));
  }
  return {"entmax_alpha_grad", worst, 1e-3, worst < 1e-3};
}

GradCheckResult model_gradcheck(uint64_t seed, int samples) {
  ModelConfig cfg;
  cfg.base_channels = 4;
  SpectrModel model(cfg, 8, seed);
  PhantomConfig pc;
  pc.width = 8;
  pc.height = 8;
  pc.bands = 8;
  pc.window_lo = 2;
  pc.window_hi = 5;
  pc.seed = seed;
  auto [cube, mask] = generate_phantom(pc, 0);

  for (auto& p : model.params()) p.tensor.zero_grad();
  Tape::active().clear();
  auto out = model.forward(cube.to_tensor());
  Tensor loss = dice_bce_loss(out.prob_map, mask);
  Tape::active().backward(loss);
  Tape::active().clear();

  Rng rng(mix_seed(seed, fnv1a("model_gradcheck")));
  const double h = 1e-3;
  double worst = 0.0;
  int accepted = 0;
  int guard = 0;
  while (accepted < samples && guard < samples * 20) {
    ++guard;
    const size_t pi = static_cast<size_t>(rng.next_u64() % model.params().size());
    Param& p = model.params()[pi];
    const size_t ei = static_cast<size_t>(rng.next_u64() % p.tensor.size());
    const float keep = p.tensor.data()[ei];
    auto fd_at = [&](double step) {
      p.tensor.data()[ei] = static_cast<float>(keep + step);
      const double up = ref::loss(model, cube, mask);
      p.tensor.data()[ei] = static_cast<float>(keep - step);
      const double dn = ref::loss(model, cube, mask);
      p.tensor.data()[ei] = keep;
      return (up - dn) / (2.0 * step);
    };
    const double fd = fd_at(h);
    const double fd2 = fd_at(h / 2);
    if (std::abs(fd - fd2) > 0.02 * std::max(std::abs(fd), std::abs(fd2)) + 1e-8)
      continue;  // difference quotient not converged: kink inside the stencil
    const double analytic =
        p.tensor.grad_allocated() ? static_cast<double>(p.tensor.grad_vec()[ei]) : 0.0;
    worst = std::max(worst, rel_err(analytic, fd));
    ++accepted;
  }
  return {"model_loss_gradient", worst, 1e-3, worst < 1e-3};
}

std::vector<GradCheckResult> run_gradcheck(uint64_t seed) {
  std::vector<GradCheckResult> results = primitive_gradcheck(seed);
  results.push_back(entmax_vjp_gradcheck(seed));
  results.push_back(entmax_alpha_gradcheck(seed));
  results.push_back(model_gradcheck(seed));
  return results;
}

}  // namespace spectr
