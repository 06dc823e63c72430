// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.
//
//   deskpt_acceptance [--full] [--only N ...] [--work DIR]
//
// The directional ablation (criteria 6 and 7) runs a reduced profile by
// default; --full runs the 8-layer d=256 profile over about 150M tokens.

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "deskpt/data/corpus.hpp"
#include "deskpt/data/shard.hpp"
#include "deskpt/diagnostics/diagnostics.hpp"
#include "deskpt/model/layers.hpp"
#include "deskpt/model/transformer.hpp"
#include "deskpt/optim/mup.hpp"
#include "deskpt/optim/newton_schulz.hpp"
#include "deskpt/optim/optimizer.hpp"
#include "deskpt/schedule/schedule.hpp"
#include "deskpt/tensor/grad_check.hpp"
#include "deskpt/tensor/graph.hpp"
#include "deskpt/tensor/ops.hpp"
#include "deskpt/trainer/ablate.hpp"
#include "deskpt/trainer/checkpoint.hpp"
#include "deskpt/trainer/ema.hpp"
#include "deskpt/trainer/trainer.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace deskpt;
using deskpt::testing::random_tensor;
using deskpt::testing::uniform_tensor;
using TD = Tensor<double>;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  bool full = false;
  fs::path work;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

std::vector<std::int32_t> random_ids(std::size_t n, std::int32_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> dist(0, vocab - 1);
  std::vector<std::int32_t> out(n);
  for (auto& t : out) t = dist(rng);
  return out;
}

// Gradient checks are projected onto fixed random weights so that every
// output coordinate feeds the checked scalar.
TD project(const TD& y, std::uint64_t seed) {
  return ops::sum(ops::mul(y, random_tensor<double>(y.shape(), seed ^ 0xacceULL)));
}

// ---------------------------------------------------------------------------
// 1. gradient correctness

struct GradCase {
  std::string name;
  std::function<std::vector<TD>(std::uint64_t)> inputs;
  std::function<TD(const std::vector<TD>&)> f;
};

std::vector<GradCase> grad_cases() {
  auto normal = [](std::vector<Shape> shapes) {
    return [shapes](std::uint64_t seed) {
      std::vector<TD> in;
      for (std::size_t i = 0; i < shapes.size(); ++i) in.push_back(random_tensor<double>(shapes[i], seed + i));
      return in;
    };
  };
  auto positive = [](Shape s) {
    return [s](std::uint64_t seed) { return std::vector<TD>{uniform_tensor<double>(s, seed, 0.5, 2.5)}; };
  };
  using V = const std::vector<TD>&;
  std::vector<GradCase> c;
  c.push_back({"matmul", normal({{2, 3, 4}, {4, 5}}), [](V in) { return ops::matmul(in[0], in[1]); }});
  c.push_back({"matmul_bt", normal({{2, 3, 4}, {2, 5, 4}}), [](V in) { return ops::matmul(in[0], in[1], true); }});
  c.push_back({"add", normal({{2, 3, 4}, {4}}), [](V in) { return ops::add(in[0], in[1]); }});
  c.push_back({"sub", normal({{3, 1, 4}, {2, 4}}), [](V in) { return ops::sub(in[0], in[1]); }});
  c.push_back({"mul", normal({{2, 3, 4}, {2, 3, 1}}), [](V in) { return ops::mul(in[0], in[1]); }});
  c.push_back({"div",
               [](std::uint64_t s) {
                 return std::vector<TD>{random_tensor<double>({3, 4}, s), uniform_tensor<double>({4}, s + 1, 0.5, 2.0)};
               },
               [](V in) { return ops::div(in[0], in[1]); }});
  c.push_back({"scale", normal({{3, 4}}), [](V in) { return ops::scale(in[0], -1.7); }});
  c.push_back({"exp", normal({{3, 4}}), [](V in) { return ops::exp(in[0]); }});
  c.push_back({"log", positive({3, 4}), [](V in) { return ops::log(in[0]); }});
  c.push_back({"sqrt", positive({3, 4}), [](V in) { return ops::sqrt(in[0]); }});
  c.push_back({"square", normal({{3, 4}}), [](V in) { return ops::square(in[0]); }});
  c.push_back({"sum_axis", normal({{2, 3, 4}}), [](V in) { return ops::sum(in[0], 1); }});
  c.push_back({"mean", normal({{3, 4}}), [](V in) { return ops::add(ops::mean(in[0], 0), ops::mean(in[0])); }});
  c.push_back({"sigmoid", normal({{3, 4}}), [](V in) { return ops::sigmoid(in[0]); }});
  c.push_back({"silu", normal({{3, 4}}), [](V in) { return ops::silu(in[0]); }});
  c.push_back({"rms_normalize", normal({{3, 8}}), [](V in) { return ops::rms_normalize(in[0]); }});
  c.push_back({"causal_softmax", normal({{2, 5, 5}}), [](V in) { return ops::causal_softmax(in[0]); }});
  c.push_back({"embed_lookup", normal({{6, 3}}), [](V in) {
                 static const std::vector<std::int32_t> ids{0, 5, 5, 2, 1, 0};
                 return ops::embed_lookup(in[0], ids, {2, 3});
               }});
  c.push_back({"transpose", normal({{2, 3, 4}}), [](V in) { return ops::transpose(in[0], 0, 2); }});
  c.push_back({"reshape", normal({{2, 3, 4}}), [](V in) { return ops::square(ops::reshape(in[0], {6, 4})); }});
  c.push_back({"slice", normal({{2, 5, 3}}), [](V in) { return ops::slice(in[0], 1, 2, 2); }});
  c.push_back({"concat", normal({{2, 2, 3}, {2, 1, 3}}), [](V in) {
                 return ops::concat(std::vector<TD>{in[0], in[1], in[0]}, 1);
               }});
  c.push_back({"rotate_half", normal({{3, 6}}), [](V in) { return ops::rotate_half(in[0]); }});
  c.push_back({"rope", normal({{2, 3, 2, 4}}), [](V in) {
                 return layers::rope_apply(in[0], {0, 1, 2}, 10000.0);
               }});
  c.push_back({"norm_scaled",
               [](std::uint64_t s) {
                 return std::vector<TD>{random_tensor<double>({2, 3, 8}, s), uniform_tensor<double>({8}, s + 1, 0.5, 1.5)};
               },
               [](V in) { return layers::norm_scaled(in[0], in[1], 3, true); }});
  for (bool qk : {false, true}) {
    c.push_back({qk ? "attention_qk_norm" : "attention",
                 [](std::uint64_t s) {
                   return std::vector<TD>{random_tensor<double>({2, 4, 2, 4}, s), random_tensor<double>({2, 4, 2, 4}, s + 1),
                                          random_tensor<double>({2, 4, 2, 4}, s + 2),
                                          uniform_tensor<double>({1}, s + 3, 0.5, 1.5)};
                 },
                 [qk](V in) { return layers::qk_norm_attention(in[0], in[1], in[2], in[3], qk); }});
  }
  c.push_back({"gate_heads", normal({{2, 3, 2, 4}, {2, 3, 6}, {2, 6}}), [](V in) {
                 return layers::gate_heads(in[0], in[1], in[2]);
               }});
  c.push_back({"value_residual",
               [](std::uint64_t s) {
                 return std::vector<TD>{random_tensor<double>({2, 3, 4}, s), random_tensor<double>({2, 3, 4}, s + 1),
                                        uniform_tensor<double>({1}, s + 2, 0.5, 1.5),
                                        uniform_tensor<double>({1}, s + 3, 0.5, 1.5),
                                        uniform_tensor<double>({1}, s + 4, 0.2, 1.0)};
               },
               [](V in) { return layers::mix_value_residual(in[0], in[1], in[2], in[3], in[4]); }});
  c.push_back({"swiglu", normal({{2, 3, 4}, {6, 4}, {4, 6}, {6, 4}}), [](V in) {
                 return layers::swiglu_ffn(in[0], in[1], in[2], in[3]);
               }});
  c.push_back({"repeat_kv", normal({{2, 3, 2, 4}}), [](V in) { return layers::repeat_kv(in[0], 2); }});
  return c;
}

ModelConfig grad_model_config(ArchToggles toggles) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.head_dim = 4;
  c.ffn_dim = 32;
  c.vocab_size = 32;
  c.max_context = 8;
  c.toggles = toggles;
  return c;
}

// Moves structured inits (unit gains, zero gates, (1, 1, 0) mixing) to
// generic points so their gradients are exercised.
void perturb(Transformer<double>& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  for (auto& p : m.parameters()) {
    for (auto& v : p.tensor.mutable_data()) {
      switch (p.role) {
        case ParamRole::norm_gain:
        case ParamRole::qk_gain:
        case ParamRole::value_mix: v = 1.0 + 0.3 * n01(rng); break;
        case ParamRole::gate_proj: v = 0.5 * n01(rng); break;
        default: v += 0.1 * n01(rng); break;
      }
    }
  }
}

// Loop-based forward and loss in 80-bit extended precision, written from the
// model definition. A 64-bit central difference bottoms out near
// ulp(loss) / (2 eps) = 2e-11, which is the size of the smallest gradient
// coordinates of this model; the extended-precision difference at the same
// eps resolves them.
using LD = long double;

// The forward is split into stages (embedding, then attention and FFN per
// layer, then the head) so a perturbed coordinate only reruns the stages at
// and after its own.
struct ReferenceModel {
  ModelConfig c;
  std::map<std::string, std::vector<LD>> w;
  std::vector<LD> cos_table, sin_table;  // [pos][pair]
  std::vector<std::int32_t> tokens, targets;
  std::size_t batch = 0, seq = 0;
  LD lambda_z = 0;

  struct State {
    std::vector<LD> x;        // (B*T, d)
    std::vector<LD> v_first;  // (B*T, kv*dh)
  };
  std::vector<State> before;  // state entering each stage, unperturbed

  ReferenceModel(const Transformer<double>& m, std::vector<std::int32_t> in, std::vector<std::int32_t> tgt,
                 std::size_t b, std::size_t t, LD lz)
      : c(m.config()), tokens(std::move(in)), targets(std::move(tgt)), batch(b), seq(t), lambda_z(lz) {
    for (const auto& p : m.parameters()) w[p.name].assign(p.tensor.data().begin(), p.tensor.data().end());
    const auto pairs = static_cast<std::size_t>(c.head_dim / 2);
    for (std::int64_t pos = 0; pos < c.max_context; ++pos) {
      for (std::size_t i = 0; i < pairs; ++i) {
        const LD ang = static_cast<LD>(pos) * std::pow(static_cast<LD>(c.rope_theta),
                                                       -2.0L * static_cast<LD>(i) / static_cast<LD>(c.head_dim));
        cos_table.push_back(std::cos(ang));
        sin_table.push_back(std::sin(ang));
      }
    }
  }

  std::size_t stage_count() const { return 2 + 2 * static_cast<std::size_t>(c.n_layers); }

  // 0 embedding, 2l - 1 attention of layer l, 2l its FFN, last the head.
  std::size_t stage_of(const std::string& name) const {
    if (name == "tok_embed") return 0;
    if (name.rfind("layers.", 0) != 0) return stage_count() - 1;
    const auto dot = name.find('.', 7);
    const auto l = static_cast<std::size_t>(std::stoul(name.substr(7, dot - 7))) + 1;
    return name.compare(dot + 1, 3, "ffn") == 0 ? 2 * l : 2 * l - 1;
  }

  const LD* at(const std::string& name) const { return w.at(name).data(); }

  static void rms_norm(const LD* x, std::size_t n, LD* y) {
    LD ms = 0;
    for (std::size_t i = 0; i < n; ++i) ms += x[i] * x[i];
    const LD inv = 1.0L / std::sqrt(ms / static_cast<LD>(n) + static_cast<LD>(1e-6));
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * inv;
  }

  // y = W x with W stored (out, in).
  static void matvec(const LD* wt, const LD* x, std::size_t in, std::size_t out, LD* y) {
    for (std::size_t r = 0; r < out; ++r) {
      LD acc = 0;
      for (std::size_t k = 0; k < in; ++k) acc += wt[r * in + k] * x[k];
      y[r] = acc;
    }
  }

  void rope(LD* v, std::size_t heads, std::size_t dh, std::size_t pos) const {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < dh / 2; ++i) {
        const LD cs = cos_table[pos * (dh / 2) + i], sn = sin_table[pos * (dh / 2) + i];
        const LD a = v[h * dh + 2 * i], b = v[h * dh + 2 * i + 1];
        v[h * dh + 2 * i] = a * cs - b * sn;
        v[h * dh + 2 * i + 1] = a * sn + b * cs;
      }
    }
  }

  void embed(State& st) const {
    const auto d = static_cast<std::size_t>(c.d_model);
    st.x.assign(batch * seq * d, 0.0L);
    for (std::size_t r = 0; r < batch * seq; ++r) {
      const LD* row = at("tok_embed") + static_cast<std::size_t>(tokens[r]) * d;
      std::copy(row, row + d, st.x.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
  }

  LD depth(std::size_t l) const {
    return c.toggles.ln_scaling && l > 1 ? 1.0L / std::sqrt(static_cast<LD>(l)) : 1.0L;
  }

  void attention(State& st, std::size_t l) const {
    const auto d = static_cast<std::size_t>(c.d_model), dh = static_cast<std::size_t>(c.head_dim);
    const auto nh = static_cast<std::size_t>(c.n_heads), nkv = static_cast<std::size_t>(c.n_kv_heads);
    const std::size_t group = nh / nkv, kvw = nkv * dh;
    const std::string p = "layers." + std::to_string(l - 1) + ".";
    const LD* gain = at(p + "attn_norm.gain");
    const LD *wq = at(p + "attn.wq"), *wk = at(p + "attn.wk"), *wv = at(p + "attn.wv"), *wo = at(p + "attn.wo");
    const LD qk_gain = c.toggles.qk_norm ? at(p + "attn.qk_gain")[0] : 0.0L;
    const LD* w_gate = c.toggles.gating ? at(p + "attn.gate") : nullptr;
    const LD sc = depth(l);
    std::vector<LD> h(seq * d), q(seq * d), k(seq * kvw), v(seq * kvw), concat(d), o(d), logit(seq);
    for (std::size_t b = 0; b < batch; ++b) {
      LD* x = st.x.data() + b * seq * d;
      for (std::size_t t = 0; t < seq; ++t) {
        rms_norm(x + t * d, d, h.data() + t * d);
        for (std::size_t i = 0; i < d; ++i) h[t * d + i] *= gain[i] * sc;
        matvec(wq, h.data() + t * d, d, d, q.data() + t * d);
        matvec(wk, h.data() + t * d, d, kvw, k.data() + t * kvw);
        matvec(wv, h.data() + t * d, d, kvw, v.data() + t * kvw);
        rope(q.data() + t * d, nh, dh, t);
        rope(k.data() + t * kvw, nkv, dh, t);
        if (c.toggles.qk_norm) {
          for (std::size_t hd = 0; hd < nh; ++hd) rms_norm(q.data() + t * d + hd * dh, dh, q.data() + t * d + hd * dh);
          for (std::size_t kv = 0; kv < nkv; ++kv) {
            rms_norm(k.data() + t * kvw + kv * dh, dh, k.data() + t * kvw + kv * dh);
          }
        }
        if (c.toggles.value_residual) {
          LD* vf = st.v_first.data() + (b * seq + t) * kvw;
          if (l == 1) std::copy(v.begin() + static_cast<std::ptrdiff_t>(t * kvw),
                                v.begin() + static_cast<std::ptrdiff_t>((t + 1) * kvw), vf);
          const LD s = at(p + "attn.vr_scale")[0], a1 = at(p + "attn.vr_alpha1")[0], a2 = at(p + "attn.vr_alpha2")[0];
          const LD norm = std::sqrt(a1 * a1 + a2 * a2 + static_cast<LD>(1e-8));
          for (std::size_t i = 0; i < kvw; ++i) v[t * kvw + i] = s * (a1 * v[t * kvw + i] + a2 * vf[i]) / norm;
        }
      }
      for (std::size_t t = 0; t < seq; ++t) {
        std::fill(concat.begin(), concat.end(), 0.0L);
        for (std::size_t hd = 0; hd < nh; ++hd) {
          const std::size_t kv = hd / group;
          const LD* qh = q.data() + t * d + hd * dh;
          for (std::size_t j = 0; j <= t; ++j) {
            const LD* kh = k.data() + j * kvw + kv * dh;
            LD dot = 0;
            for (std::size_t i = 0; i < dh; ++i) dot += qh[i] * kh[i];
            logit[j] = c.toggles.qk_norm ? dot * qk_gain : dot / std::sqrt(static_cast<LD>(dh));
          }
          const LD mx = *std::max_element(logit.begin(), logit.begin() + static_cast<std::ptrdiff_t>(t + 1));
          LD den = 0;
          for (std::size_t j = 0; j <= t; ++j) den += (logit[j] = std::exp(logit[j] - mx));
          LD gate = 1.0L;
          if (w_gate) {
            LD g = 0;
            for (std::size_t i = 0; i < d; ++i) g += h[t * d + i] * w_gate[hd * d + i];
            gate = 2.0L / (1.0L + std::exp(-g));
          }
          for (std::size_t j = 0; j <= t; ++j) {
            for (std::size_t i = 0; i < dh; ++i) concat[hd * dh + i] += gate * logit[j] / den * v[j * kvw + kv * dh + i];
          }
        }
        matvec(wo, concat.data(), d, d, o.data());
        for (std::size_t i = 0; i < d; ++i) x[t * d + i] += o[i];
      }
    }
  }

  void ffn(State& st, std::size_t l) const {
    const auto d = static_cast<std::size_t>(c.d_model), f = static_cast<std::size_t>(c.ffn_dim);
    const std::string p = "layers." + std::to_string(l - 1) + ".";
    const LD* gain = at(p + "ffn_norm.gain");
    const LD *w1 = at(p + "ffn.w1"), *w2 = at(p + "ffn.w2"), *w3 = at(p + "ffn.w3");
    const LD sc = depth(l);
    std::vector<LD> h(d), a(f), g(f), o(d);
    for (std::size_t r = 0; r < batch * seq; ++r) {
      LD* x = st.x.data() + r * d;
      rms_norm(x, d, h.data());
      for (std::size_t i = 0; i < d; ++i) h[i] *= gain[i] * sc;
      matvec(w1, h.data(), d, f, a.data());
      matvec(w3, h.data(), d, f, g.data());
      for (std::size_t i = 0; i < f; ++i) a[i] = a[i] / (1.0L + std::exp(-a[i])) * g[i];
      matvec(w2, a.data(), f, d, o.data());
      for (std::size_t i = 0; i < d; ++i) x[i] += o[i];
    }
  }

  LD head(const State& st) const {
    const auto d = static_cast<std::size_t>(c.d_model), vocab = static_cast<std::size_t>(c.vocab_size);
    const LD* gain = at("final_norm.gain");
    std::vector<LD> h(d), z(vocab);
    LD ce = 0, zz = 0;
    for (std::size_t r = 0; r < batch * seq; ++r) {
      rms_norm(st.x.data() + r * d, d, h.data());
      for (std::size_t i = 0; i < d; ++i) h[i] *= gain[i];
      matvec(at("lm_head"), h.data(), d, vocab, z.data());
      for (auto& e : z) e *= static_cast<LD>(c.output_scale);
      const LD mx = *std::max_element(z.begin(), z.end());
      LD s = 0;
      for (LD e : z) s += std::exp(e - mx);
      const LD lse = mx + std::log(s);
      ce += lse - z[static_cast<std::size_t>(targets[r])];
      zz += lse * lse;
    }
    const auto n = static_cast<LD>(batch * seq);
    return ce / n + lambda_z * zz / n;
  }

  // Runs stages [from, end) starting from `st` and returns the loss.
  LD run_from(std::size_t from, State st) const {
    for (std::size_t s = from; s + 1 < stage_count(); ++s) {
      if (s == 0) {
        embed(st);
        st.v_first.assign(batch * seq * static_cast<std::size_t>(c.n_kv_heads * c.head_dim), 0.0L);
      } else if (s % 2 == 1) {
        attention(st, (s + 1) / 2);
      } else {
        ffn(st, s / 2);
      }
      if (from == 0 && before.size() < stage_count()) const_cast<ReferenceModel*>(this)->before.push_back(st);
    }
    return head(st);
  }

  // Unperturbed loss; also records the state entering every stage.
  LD loss() {
    before.assign(1, State{});
    return run_from(0, State{});
  }

  LD loss_after_change(std::size_t stage) const { return run_from(stage, before[stage]); }
};

Outcome criterion_gradients(const Context&) {
  double worst_op = 0.0, worst_model = 0.0, worst_forward = 0.0, worst_abs = 0.0;
  std::string worst_op_name, worst_param;
  for (const auto& gc : grad_cases()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto inputs = gc.inputs(1000 * seed + 17);
      const auto r = grad_check([&](const std::vector<TD>& in) { return project(gc.f(in), seed); }, inputs, 1e-5);
      if (r.max_relative_error > worst_op) {
        worst_op = r.max_relative_error;
        worst_op_name = gc.name;
      }
    }
  }
  // Loss ops, with and without the z term.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto tgt = random_ids(6, 7, seed);
    const std::vector<std::uint8_t> mask{1, 1, 0, 1, 1, 1};
    for (double lz : {0.0, 0.1}) {
      const auto r = grad_check(
          [&](const std::vector<TD>& in) { return loss_ce_zloss<double>(in[0], tgt, mask, lz).total; },
          {random_tensor<double>({2, 3, 7}, seed + 5, 2.0)}, 1e-5);
      if (r.max_relative_error > worst_op) {
        worst_op = r.max_relative_error;
        worst_op_name = "loss_ce_zloss";
      }
    }
  }
  const auto t_ops = std::chrono::steady_clock::now();
  // Full model: 64-bit reverse-mode gradients against central differences
  // (eps 1e-5) of the extended-precision reference.
  const LD eps = 1e-5L;
  for (auto toggles : {ArchToggles::all(), ArchToggles::none()}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Transformer<double> m(grad_model_config(toggles), seed, InitOptions{1.0, 1.0, 1.0});
      perturb(m, seed + 100);
      const auto ids = random_ids(2 * 4, 32, seed + 200);
      std::vector<std::int32_t> in, tgt;
      for (int b = 0; b < 2; ++b) {
        for (int t = 0; t < 3; ++t) {
          in.push_back(ids[static_cast<std::size_t>(b * 4 + t)]);
          tgt.push_back(ids[static_cast<std::size_t>(b * 4 + t + 1)]);
        }
      }
      double loss64 = 0.0;
      {
        Graph<double> g;
        GraphScope<double> scope(g);
        const auto loss = loss_ce_zloss<double>(m.forward(in, 2, 3), tgt, {}).total;
        loss64 = loss.data()[0];
        g.backward(loss);
      }
      ReferenceModel ref(m, in, tgt, 2, 3, kDefaultZLoss);
      const LD base = ref.loss();
      worst_forward = std::max(worst_forward, std::abs(static_cast<double>(base) - loss64));
      for (const auto& p : m.parameters()) {
        auto& values = ref.w[p.name];
        const auto grad = p.tensor.grad();
        const std::size_t stage = ref.stage_of(p.name);
        for (std::size_t j = 0; j < values.size(); ++j) {
          // Rows of tokens absent from the input cannot move the loss.
          if (p.name == "tok_embed" &&
              std::find(in.begin(), in.end(), static_cast<std::int32_t>(j / static_cast<std::size_t>(m.config().d_model))) == in.end()) {
            if (grad[j] != 0.0) {
              worst_model = INFINITY;
              worst_param = "tok_embed (unused row)";
            }
            continue;
          }
          const LD keep = values[j];
          values[j] = keep + eps;
          const LD up = ref.loss_after_change(stage);
          values[j] = keep - eps;
          const LD down = ref.loss_after_change(stage);
          values[j] = keep;
          const double numeric = static_cast<double>((up - down) / (2.0L * eps));
          const double analytic = grad[j];
          const double rel = std::abs(analytic - numeric) /
                             std::max({std::abs(analytic), std::abs(numeric), 1e-8});
          worst_abs = std::max(worst_abs, std::abs(analytic - numeric));
          if (rel > worst_model) {
            worst_model = rel;
            worst_param = p.name;
          }
        }
      }
    }
  }
  const double model_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_ops).count();
  const bool pass = worst_op < 1e-4 && worst_model < 1e-4 && worst_forward < 1e-12;
  return {pass, fmt("%zu op kinds + loss, 20 seeds: worst %.2e (%s); 2-layer d=16 V=32 model, 2 toggle sets x 20 "
                    "seeds against an extended-precision reference: worst %.2e (%s, max abs %.1e), forward "
                    "agreement %.1e (model part %.0f s); bound 1e-4",
                    grad_cases().size(), worst_op, worst_op_name.c_str(), worst_model, worst_param.c_str(),
                    worst_abs, worst_forward, model_secs)};
}

// ---------------------------------------------------------------------------
// 2. Newton-Schulz oracle

Eigen::MatrixXd random_orthonormal(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  Eigen::MatrixXd g(rows, cols);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = n01(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
}

Outcome criterion_newton_schulz(const Context&) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> dim(2, 64);
  std::uniform_real_distribution<double> u01;
  double lo = INFINITY, hi = 0.0, worst_entry = 0.0, worst_zero = 0.0;
  int rank_deficient = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int m = dim(rng), n = dim(rng), k = std::min(m, n);
    const double cond = std::exp(u01(rng) * std::log(100.0));
    const double scale = std::exp((u01(rng) - 0.5) * 8.0);
    Eigen::MatrixXd uu = random_orthonormal(m, k, rng), vv = random_orthonormal(n, k, rng);
    Eigen::VectorXd s(k);
    // Log-spaced spectrum spanning exactly `cond`, shuffled.
    for (int i = 0; i < k; ++i) s(i) = scale * std::pow(cond, -static_cast<double>(i) / std::max(1, k - 1));
    std::shuffle(s.data(), s.data() + k, rng);
    int zeros = 0;
    if (trial % 4 == 3 && k > 2) {
      zeros = 1 + static_cast<int>(u01(rng) * (k / 2));
      for (int i = 0; i < zeros; ++i) s(i) = 0.0;
      ++rank_deficient;
    }
    const Eigen::MatrixXd mat = uu * s.asDiagonal() * vv.transpose();
    std::vector<double> values(static_cast<std::size_t>(m * n));
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < n; ++c) values[static_cast<std::size_t>(r * n + c)] = mat(r, c);
    const TD out = ns_orthogonalize(TD({m, n}, values));
    Eigen::MatrixXd o(m, n);
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < n; ++c) o(r, c) = out.data()[static_cast<std::size_t>(r * n + c)];

    // Polar factor restricted to the nonzero part of the spectrum.
    Eigen::MatrixXd polar = Eigen::MatrixXd::Zero(m, n);
    for (int i = zeros; i < k; ++i) polar += uu.col(i) * vv.col(i).transpose();
    worst_entry = std::max(worst_entry, (o - polar).cwiseAbs().maxCoeff());

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(o);
    const Eigen::VectorXd sv = svd.singularValues();  // descending
    for (int i = 0; i < k - zeros; ++i) {
      lo = std::min(lo, sv(i));
      hi = std::max(hi, sv(i));
    }
    for (int i = k - zeros; i < k; ++i) worst_zero = std::max(worst_zero, sv(i));
  }
  bool zero_flag = false;
  const TD zero = ns_orthogonalize(TD::filled({5, 7}, 0.0), {}, &zero_flag);
  const bool zero_ok = zero_flag && std::all_of(zero.data().begin(), zero.data().end(), [](double v) { return v == 0.0; });
  const bool pass = lo >= 0.7 && hi <= 1.3 && worst_entry <= 0.05 && worst_zero <= 1e-6 && zero_ok;
  return {pass, fmt("100 matrices (%d rank-deficient), cond <= 100: nonzero singular values in [%.3f, %.3f]; "
                    "max entry deviation from polar factor %.4f; max image of a zero singular value %.1e; "
                    "zero matrix %s",
                    rank_deficient, lo, hi, worst_entry, worst_zero, zero_ok ? "unchanged" : "CHANGED")};
}

// ---------------------------------------------------------------------------
// 3. equivalence at init

Outcome criterion_equivalence(const Context&) {
  double worst = 0.0;
  int cases = 0;
  for (bool qk : {false, true}) {
    for (bool lns : {false, true}) {
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        ModelConfig off = grad_model_config({qk, false, false, lns});
        off.d_model = 32;
        off.head_dim = 8;
        off.max_context = 16;
        ModelConfig on = off;
        on.toggles.gating = true;
        on.toggles.value_residual = true;
        const InitOptions init{1.0, 1.0, 1.0};
        const Transformer<double> a(off, seed, init), b(on, seed, init);
        const auto ids = random_ids(3 * 16, 32, seed + 9);
        ForwardTrace<double> ta, tb;
        const auto la = a.forward(ids, 3, 16, &ta);
        const auto lb = b.forward(ids, 3, 16, &tb);
        worst = std::max(worst, deskpt::testing::max_abs_diff(la, lb));
        for (std::size_t l = 0; l < ta.residual.size(); ++l) {
          worst = std::max(worst, deskpt::testing::max_abs_diff(ta.residual[l], tb.residual[l]));
        }
        ++cases;
      }
    }
  }
  return {worst <= 1e-6, fmt("%d model pairs (gating + value residual on vs off, 64-bit): max |difference| over "
                             "logits and residual streams %.2e; bound 1e-6",
                             cases, worst)};
}

// ---------------------------------------------------------------------------
// 4. schedule golden values

Outcome criterion_schedules(const Context&) {
  bool pass = true;
  std::ostringstream d;
  for (double peak : {1.0, 3e-3, 0.0235}) {
    ScheduleSpec cos;
    cos.kind = ScheduleKind::cosine;
    cos.peak_lr = peak;
    cos.warmup_steps = 100;
    cos.total_steps = 1000;
    const double end = cosine_lr(1000, cos);
    pass &= std::abs(end - 0.01 * peak) <= 1e-12;
  }
  d << "cosine end = 0.01 peak for 3 peaks; ";

  ScheduleSpec w;
  w.kind = ScheduleKind::wsd;
  w.peak_lr = 2e-3;
  w.warmup_steps = 50;
  w.total_steps = 1000;
  w.decay_fraction = 0.2;
  const double stable = 0.55 * w.peak_lr;
  const double lr_min = 0.01 * stable;
  bool stable_exact = true;
  for (std::int64_t s = w.warmup_steps; s <= 800; ++s) stable_exact &= wsd_lr(s, w) == stable;
  const double quarter = wsd_lr(850, w);
  const double expect_quarter = 0.5 * (stable - lr_min) + lr_min;
  const double at_end = wsd_lr(1000, w);
  pass &= stable_exact && std::abs(quarter - expect_quarter) <= 1e-15 && std::abs(at_end - lr_min) <= 1e-15;
  d << fmt("WSD stable interval exact: %s; lr at decay progress 0.25 = %.17g (expected %.17g); end = %.17g "
           "(lr_min %.17g)",
           stable_exact ? "yes" : "NO", quarter, expect_quarter, at_end, lr_min);
  return {pass, d.str()};
}

// ---------------------------------------------------------------------------
// 5. EMA oracle

Outcome criterion_ema(const Context& ctx) {
  const fs::path dir = ctx.work / "ema";
  fs::remove_all(dir);
  fs::create_directories(dir);
  ModelConfig cfg = grad_model_config(ArchToggles::all());
  std::vector<Transformer<double>> models;
  for (int i = 0; i < 10; ++i) {
    Transformer<double> m(cfg, 0, InitOptions{1.0, 1.0, 1.0});
    perturb(m, 500 + static_cast<std::uint64_t>(i));
    CheckpointMeta meta;
    meta.model = cfg;
    meta.iteration = 100 * (i + 1);
    meta.precision = "double";
    save_checkpoint(dir / fmt("ckpt_%09d.dpck", 100 * (i + 1)), make_checkpoint<double>(m, nullptr, meta));
    models.push_back(std::move(m));
  }
  const double beta = 0.8;
  const auto avg = posthoc_ema_dir(dir, beta, 0);
  // Unrolled: e_10 = beta^9 c_1 + sum_{i=2..10} (1 - beta) beta^(10 - i) c_i.
  double worst = 0.0;
  for (const auto& p : models.front().parameters()) {
    const auto& got = avg.model.at(p.name).values;
    for (std::size_t j = 0; j < got.size(); ++j) {
      double expect = std::pow(beta, 9) * models[0].param(p.name).data()[j];
      for (int i = 2; i <= 10; ++i) {
        expect += (1.0 - beta) * std::pow(beta, 10 - i) * models[static_cast<std::size_t>(i - 1)].param(p.name).data()[j];
      }
      worst = std::max(worst, std::abs(got[j] - expect));
    }
  }
  const auto single = posthoc_ema(std::vector<Checkpoint>{load_checkpoint(list_checkpoints(dir).back())}, beta);
  bool identity = true;
  for (const auto& p : models.back().parameters()) {
    const auto& got = single.model.at(p.name).values;
    identity &= std::equal(got.begin(), got.end(), p.tensor.data().begin());
  }
  return {worst < 1e-6 && identity, fmt("10 checkpoints on disk, beta 0.8: max |ema - unrolled sum| %.2e (bound "
                                        "1e-6); single checkpoint identity: %s",
                                        worst, identity ? "exact" : "NOT exact")};
}

// ---------------------------------------------------------------------------
// 6 and 7. directional ablation and kurtosis

struct AblationProfile {
  std::string name;
  std::int64_t d_model, n_heads, ffn_dim, batch, seq, iterations, warmup;
  SynthCorpusOptions corpus;
};

AblationProfile ablation_profile(bool full) {
  if (full) return {"full", 256, 4, 688, 32, 256, 18300, 200, {4000, 6000, 7}};
  return {"reduced", 64, 4, 172, 8, 64, 1000, 25, {300, 1500, 7}};
}

RunConfig ablation_base(const AblationProfile& p, const fs::path& data, const fs::path& out) {
  RunConfig c;
  c.model.d_model = p.d_model;
  c.model.n_layers = 8;
  c.model.n_heads = p.n_heads;
  c.model.n_kv_heads = p.n_heads / 2;
  c.model.head_dim = p.d_model / p.n_heads;
  c.model.ffn_dim = p.ffn_dim;
  c.model.max_context = p.seq;
  c.optimizer.kind = OptimizerKind::adamw;
  // Seeds vary the init only; every member sees the same batches.
  c.data_seed = 0;
  c.train_data = data;
  c.out_dir = out;
  c.log_every = 50;
  c.final_loss_window = std::max<std::int64_t>(20, p.iterations / 10);
  StagePlan s;
  s.name = "pretrain";
  s.iterations = p.iterations;
  s.batch = p.batch;
  s.seq = p.seq;
  s.grad_accum = 2;
  for (auto* sched : {&s.muon_schedule, &s.adamw_schedule}) {
    sched->kind = ScheduleKind::wsd;
    sched->warmup_steps = p.warmup;
    sched->total_steps = s.updates();
    sched->decay_fraction = 0.2;
  }
  s.mixture.weights = {{"prose", 0.5}, {"code", 0.3}, {"math", 0.2}};
  s.mixture.seed = 1;
  c.stages = {s};
  return c;
}

nlohmann::json toggles_patch(bool qk, bool gate, bool vr, bool lns) {
  return {{"model", {{"toggles", {{"qk_norm", qk}, {"gating", gate}, {"value_residual", vr}, {"ln_scaling", lns}}}}}};
}

struct AblationRun {
  AblationReport report;
  std::map<std::string, std::vector<fs::path>> final_checkpoints;  // row -> per seed
  fs::path heldout;
  std::int64_t seq = 0;
  std::string profile;
  double seconds = 0.0;
};

const AblationRun& ablation_run(const Context& ctx) {
  static std::optional<AblationRun> cached;
  if (cached) return *cached;
  const auto t0 = std::chrono::steady_clock::now();
  const auto prof = ablation_profile(ctx.full);
  const fs::path root = ctx.work / ("ablation_" + prof.name);
  const fs::path data = root / "data";
  if (!fs::exists(data / "train")) write_synth_corpus(data, prof.corpus);
  AblationGrid grid;
  grid.base = ablation_base(prof, data / "train", root / "runs");
  grid.base_dir = root;
  grid.out_dir = root / "grid";
  grid.seeds = {0, 1, 2};
  auto all = toggles_patch(true, true, true, true);
  auto all_muon = all;
  all_muon["optimizer"] = {{"kind", "normuon"}, {"cautious", true}};
  grid.rows = {{"baseline", toggles_patch(false, false, false, false), {}},
               {"+qk_norm", toggles_patch(true, false, false, false), {}},
               {"all", all, {}},
               {"all+NorMuon+CWD", all_muon, {}}};
  grid.baseline = "baseline";
  AblationRun run;
  run.report = run_ablation(grid, [&](const AblationRow& row, std::uint64_t seed, const RunConfig&,
                                      const TrainResult& r) {
    std::fprintf(stderr, "  [ablation %s] %s seed %llu: final loss %.4f\n", prof.name.c_str(), row.name.c_str(),
                 static_cast<unsigned long long>(seed), r.final_loss);
    run.final_checkpoints[row.name].push_back(r.manifest.checkpoints.back());
  });
  run.heldout = data / "heldout";
  run.seq = prof.seq;
  run.profile = prof.name;
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  cached = std::move(run);
  return *cached;
}

Outcome criterion_directional(const Context& ctx) {
  const auto& run = ablation_run(ctx);
  const auto& base = run.report.row("baseline");
  const auto& all = run.report.row("all");
  const auto& muon = run.report.row("all+NorMuon+CWD");
  for (const auto* r : {&base, &all, &muon}) {
    if (r->failed) return {false, "row " + r->name + " failed: " + r->error};
  }
  const double gap_a = base.mean - all.mean, sd_a = std::max(base.stddev, all.stddev);
  const double gap_b = all.mean - muon.mean, sd_b = std::max(all.stddev, muon.stddev);
  const bool a = gap_a > 0.0 && gap_a > sd_a;
  const bool b = gap_b > 0.0 && gap_b > sd_b;
  return {a && b,
          fmt("%s profile, 3 seeds, %.0f s: (a) all %.4f vs baseline %.4f, gap %.4f (%.2f%%) vs seed sd %.4f %s; "
              "(b) NorMuon+CWD %.4f vs AdamW %.4f, gap %.4f (%.2f%%) vs seed sd %.4f %s",
              run.profile.c_str(), run.seconds, all.mean, base.mean, gap_a, 100.0 * gap_a / base.mean, sd_a,
              a ? "ok" : "FAIL", muon.mean, all.mean, gap_b, 100.0 * gap_b / all.mean, sd_b, b ? "ok" : "FAIL")};
}

Outcome criterion_kurtosis(const Context& ctx) {
  const auto& run = ablation_run(ctx);
  auto heldout = std::make_shared<const std::vector<TokenShard>>(read_shard_dir(run.heldout));
  MixtureSpec spec;
  spec.weights = {{"prose", 1.0}, {"code", 1.0}, {"math", 1.0}};
  spec.seed = 99;
  BatchStream stream(heldout, spec, 4, run.seq);
  std::vector<PackedBatch> batches;
  for (int i = 0; i < 8; ++i) batches.push_back(stream.next());

  // Mean per-layer attention-logit kurtosis across seeds, and the logit bound
  // on every probed batch of every QK-norm model.
  auto mean_profile = [&](const std::string& row, bool check_bound, double& worst_slack) {
    std::vector<double> mean;
    const auto& ckpts = run.final_checkpoints.at(row);
    for (const auto& path : ckpts) {
      const auto model = model_from_checkpoint<float>(load_checkpoint(path));
      const auto prof = kurtosis_profile<float>(model, batches);
      if (mean.empty()) mean.assign(prof.size(), 0.0);
      for (std::size_t l = 0; l < prof.size(); ++l) mean[l] += prof[l].kurtosis / static_cast<double>(ckpts.size());
      if (!check_bound) continue;
      const double dh = static_cast<double>(model.config().head_dim);
      for (const auto& b : batches) {
        ForwardTrace<float> trace;
        model.forward(b.tokens, b.batch, b.seq, &trace);
        for (std::size_t l = 0; l < trace.attention_logits.size(); ++l) {
          const double gamma = std::abs(model.param(fmt("layers.%zu.attn.qk_gain", l)).data()[0]);
          double mx = 0.0;
          for (float x : trace.attention_logits[l].data()) mx = std::max(mx, std::abs(static_cast<double>(x)));
          // float rounding allowance on top of the exact bound
          worst_slack = std::max(worst_slack, mx / (gamma * dh * (1.0 + 1e-5)));
        }
      }
    }
    return mean;
  };
  double ratio_on = 0.0, unused = 0.0;
  const auto on = mean_profile("+qk_norm", true, ratio_on);
  const auto off = mean_profile("baseline", false, unused);
  int lower = 0;
  std::ostringstream per_layer;
  for (std::size_t l = 0; l < on.size(); ++l) {
    lower += on[l] < off[l] ? 1 : 0;
    per_layer << (l ? " " : "") << fmt("%.2f/%.2f", on[l], off[l]);
  }
  const bool bound = ratio_on <= 1.0;
  return {lower >= 7 && bound, fmt("kurtosis on/off per layer [%s]: lower in %d of %zu layers (need 7); max "
                                   "|logit| / (gamma d_h) = %.4f over 8 batches x 3 seeds %s",
                                   per_layer.str().c_str(), lower, on.size(), ratio_on, bound ? "ok" : "FAIL")};
}

// ---------------------------------------------------------------------------
// 8. WSD sweep harness

RunConfig tiny_run(const fs::path& data, const fs::path& out, std::int64_t iterations) {
  RunConfig c;
  c.model.d_model = 32;
  c.model.n_layers = 2;
  c.model.n_heads = 4;
  c.model.n_kv_heads = 2;
  c.model.head_dim = 8;
  c.model.ffn_dim = 64;
  c.model.max_context = 32;
  c.model.toggles = ArchToggles::all();
  c.train_data = data;
  c.out_dir = out;
  c.log_every = 5;
  c.final_loss_window = 10;
  StagePlan s;
  s.iterations = iterations;
  s.batch = 4;
  s.seq = 32;
  s.grad_accum = 2;
  for (auto* sched : {&s.muon_schedule, &s.adamw_schedule}) {
    sched->kind = ScheduleKind::wsd;
    sched->warmup_steps = 2;
    sched->total_steps = s.updates();
  }
  s.mixture.weights = {{"prose", 0.5}, {"code", 0.3}, {"math", 0.2}};
  s.mixture.seed = 4;
  c.stages = {s};
  return c;
}

fs::path tiny_corpus(const Context& ctx) {
  const fs::path dir = ctx.work / "tiny_corpus";
  if (!fs::exists(dir / "train")) write_synth_corpus(dir, {30, 800, 3});
  return dir;
}

Outcome criterion_wsd_sweep(const Context& ctx) {
  const fs::path root = ctx.work / "wsd_sweep";
  fs::remove_all(root);
  AblationGrid grid;
  grid.base = tiny_run(tiny_corpus(ctx) / "train", root / "runs", 80);
  grid.base_dir = root;
  grid.out_dir = root / "grid";
  grid.rows = schedule_grid_rows();
  grid.seeds = {0, 1};
  std::set<std::int64_t> iterations;
  std::map<std::string, std::vector<double>> end_lr;
  const auto report = run_ablation(grid, [&](const AblationRow& row, std::uint64_t, const RunConfig&,
                                             const TrainResult& r) {
    iterations.insert(r.iterations);
    end_lr[row.name].push_back(r.updates.back().lr_adamw);
  });
  bool ok = report.rows.size() == 5 && iterations.size() == 1;
  for (const auto& r : report.rows) ok &= !r.failed && r.losses.size() == 2 && std::isfinite(r.mean);
  std::ifstream md(grid.out_dir / "report.md");
  std::string header;
  std::getline(md, header);
  ok &= header.find("Final train loss") != std::string::npos && fs::exists(grid.out_dir / "report.json");
  std::ostringstream rows;
  for (const auto& r : report.rows) rows << (rows.tellp() ? ", " : "") << r.name << fmt(" %.4f", r.mean);
  return {ok, fmt("%zu rows x 2 seeds at %lld iterations each; report.md and report.json written; [%s]",
                  report.rows.size(), iterations.empty() ? 0LL : static_cast<long long>(*iterations.begin()),
                  rows.str().c_str())};
}

// ---------------------------------------------------------------------------
// 9. accumulation equivalence

PackedBatch rows_of(const std::vector<std::int32_t>& stream, std::int64_t first, std::int64_t rows, std::int64_t seq) {
  PackedBatch b;
  b.batch = rows;
  b.seq = seq;
  for (std::int64_t r = first; r < first + rows; ++r) {
    for (std::int64_t t = 0; t < seq; ++t) {
      b.tokens.push_back(stream[static_cast<std::size_t>(r * (seq + 1) + t)]);
      b.targets.push_back(stream[static_cast<std::size_t>(r * (seq + 1) + t + 1)]);
    }
  }
  b.loss_mask.assign(b.tokens.size(), 1);
  return b;
}

Outcome criterion_accumulation(const Context&) {
  double worst = 0.0;
  for (auto kind : {OptimizerKind::normuon, OptimizerKind::adamw}) {
    ModelConfig cfg = grad_model_config(ArchToggles::all());
    cfg.vocab_size = 258;
    cfg.max_context = 16;
    const InitOptions init{1.0, 1.0, 1.0};
    Transformer<double> one(cfg, 3, init), two(cfg, 3, init);
    OptimizerConfig oc;
    oc.kind = kind;
    Optimizer<double> opt_one(one, oc), opt_two(two, oc);
    for (int step = 0; step < 10; ++step) {
      const auto stream = random_ids(4 * 17, 258, 700 + static_cast<std::uint64_t>(step));
      one.zero_grad();
      two.zero_grad();
      accumulate_micro_batch(one, rows_of(stream, 0, 4, 16), kDefaultZLoss);
      accumulate_micro_batch(two, rows_of(stream, 0, 2, 16), kDefaultZLoss);
      accumulate_micro_batch(two, rows_of(stream, 2, 2, 16), kDefaultZLoss);
      scale_gradients(two, 0.5);
      opt_one.step(one, 0.02, 0.005);
      opt_two.step(two, 0.02, 0.005);
      for (std::size_t i = 0; i < one.parameters().size(); ++i) {
        worst = std::max(worst, deskpt::testing::max_abs_diff(one.parameters()[i].tensor, two.parameters()[i].tensor));
      }
    }
  }
  return {worst < 1e-5, fmt("NorMuon and AdamW, 10 random steps each (64-bit): max |param difference| "
                            "grad_accum=2 vs 1 = %.2e; bound 1e-5",
                            worst)};
}

// ---------------------------------------------------------------------------
// 10. muP coordinate check

Outcome criterion_mup(const Context&) {
  CoordinateCheckOptions o;
  o.widths = {64, 128, 256};
  o.steps = 10;
  o.mup = true;
  const auto r = coordinate_check(o);
  o.mup = false;
  const auto sp = coordinate_check(o);
  return {r.max_ratio <= 2.0, fmt("widths 64/128/256, 10 steps: max/min residual RMS ratio %.3f with muP (bound 2); "
                                  "%.3f under standard parametrization",
                                  r.max_ratio, sp.max_ratio)};
}

// ---------------------------------------------------------------------------
// 11. determinism and persistence

bool same_params(const Transformer<float>& a, const Transformer<float>& b) {
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto x = a.parameters()[i].tensor.data(), y = b.parameters()[i].tensor.data();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
  }
  return true;
}

bool same_trace(std::span<const IterationRecord> a, std::span<const IterationRecord> b) {
  return std::equal(a.begin(), a.end(), b.begin(), b.end(), [](const auto& x, const auto& y) {
    return x.iteration == y.iteration && x.ce == y.ce && x.z_term == y.z_term;
  });
}

bool same_checkpoint(const Checkpoint& a, const Checkpoint& b) {
  auto same = [](const std::map<std::string, StoredTensor>& x, const std::map<std::string, StoredTensor>& y) {
    if (x.size() != y.size()) return false;
    for (const auto& [name, t] : x) {
      auto it = y.find(name);
      if (it == y.end() || it->second.dtype != t.dtype || it->second.shape != t.shape) return false;
      if (std::memcmp(t.values.data(), it->second.values.data(), t.values.size() * sizeof(double)) != 0) return false;
    }
    return true;
  };
  return nlohmann::json(a.meta) == nlohmann::json(b.meta) && same(a.model, b.model) && same(a.optimizer, b.optimizer);
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome criterion_determinism(const Context& ctx) {
  const fs::path root = ctx.work / "determinism";
  fs::remove_all(root);
  const auto data = tiny_corpus(ctx);
  auto shards = std::make_shared<const std::vector<TokenShard>>(read_shard_dir(data / "train"));
  auto cfg = [&](const std::string& name) {
    auto c = tiny_run(data / "train", root / name, 20);
    c.stages[0].checkpoint_every = 10;
    return c;
  };

  Trainer<float> a(cfg("a"), shards), b(cfg("b"), shards);
  const auto ra = a.run();
  const auto rb = b.run();
  const bool repro = same_trace(ra.losses, rb.losses) && same_params(a.model(), b.model());

  Trainer<float> first(cfg("c"), shards);
  first.run(10);
  const fs::path saved = root / "mid.dpck";
  const auto mid = first.checkpoint();
  save_checkpoint(saved, mid);
  const auto loaded = load_checkpoint(saved);
  save_checkpoint(root / "again.dpck", loaded);
  const bool roundtrip = same_checkpoint(mid, loaded) && file_bytes(saved) == file_bytes(root / "again.dpck");

  Trainer<float> resumed(cfg("d"), shards);
  resumed.resume(loaded);
  const auto rr = resumed.run();
  const bool resume_ok = rr.losses.size() == 10 &&
                         same_trace(rr.losses, std::span<const IterationRecord>(ra.losses).subspan(10)) &&
                         same_params(resumed.model(), a.model());
  return {repro && roundtrip && resume_ok,
          fmt("same config + seed: loss trace and weights %s; checkpoint save/load %s; resume at iteration 10 vs "
              "uninterrupted, iterations 11-20: %s",
              repro ? "bit-identical" : "DIFFER", roundtrip ? "bit-exact" : "NOT bit-exact",
              resume_ok ? "bit-identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deskpt acceptance checks"};
  Context ctx;
  std::vector<int> only;
  std::string work;
  app.add_flag("--full", ctx.full, "Run the ablation criteria at full desk scale (hours to days)");
  app.add_option("--only", only, "Criteria to run (default all)");
  app.add_option("--work", work, "Scratch directory (default: a fresh temporary directory)");
  CLI11_PARSE(app, argc, argv);
  ctx.work = work.empty() ? fs::temp_directory_path() / "deskpt_acceptance" : fs::path(work);
  fs::create_directories(ctx.work);

  const std::vector<std::pair<std::string, std::function<Outcome(const Context&)>>> criteria = {
      {"gradient correctness", criterion_gradients},
      {"orthogonalization oracle", criterion_newton_schulz},
      {"equivalence at init", criterion_equivalence},
      {"schedule golden values", criterion_schedules},
      {"EMA oracle", criterion_ema},
      {"directional ablation", criterion_directional},
      {"kurtosis direction and logit bound", criterion_kurtosis},
      {"WSD sweep harness", criterion_wsd_sweep},
      {"accumulation equivalence", criterion_accumulation},
      {"muP coordinate check", criterion_mup},
      {"determinism and persistence", criterion_determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += o.pass ? 0 : 1;
    std::printf("[%s] %2d %s (%.1f s): %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), secs,
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
