#include <cmath>
#include <filesystem>

#include "chg/evaluate.hpp"
#include "chg/io.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace chg;

namespace {

double max_abs_diff(std::span<const double> a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<double> random_soft_logits(Rng& rng, std::size_t n) {
  std::vector<double> s(n);
  for (auto& x : s) x = rng.uniform(-3.0, 3.0);
  return s;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("all-one hard gates are bitwise identical to the ungated forward") {
  const auto cfg = testing::small_config();
  const auto w = testing::lively_model(cfg, 11);
  const auto ones = GateMatrix::ones(cfg.n_layers, cfg.n_heads);
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto toks = testing::random_tokens(rng, 1 + rng.uniform_index(cfg.max_seq_len), 64);
    const auto a = forward<float>(w, toks, ones);
    const auto b = forward_ungated<float>(w, toks);
    REQUIRE(a.numel() == b.numel());
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  }
}

TEST_CASE("soft gates match the naive forward") {
  const auto cfg = testing::small_config();
  const auto w = testing::lively_model(cfg, 12);
  const auto w64 = weights_cast<double>(w);
  Rng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const auto toks = testing::random_tokens(rng, 20, 64);
    const auto g = GateMatrix::soft(cfg.n_layers, cfg.n_heads, random_soft_logits(rng, cfg.n_gates()), 8.0);
    const auto oracle = testing::naive_forward(w, toks, g.gates());
    CHECK(max_abs_diff(forward<double>(w64, toks, g).data(), oracle) < 1e-5);
    const auto f32 = forward<float>(w, toks, g);
    CHECK(testing::rel_err(testing::to_doubles(f32.data()), oracle) < 1e-5);
  }
}

TEST_CASE("hard gate zero equals a zeroed concatenation block") {
  const auto cfg = testing::small_config();
  const auto w = testing::lively_model(cfg, 13);
  const auto w64 = weights_cast<double>(w);
  Rng rng(3);
  const auto toks = testing::random_tokens(rng, 16, 64);
  const auto g = GateMatrix::ones(cfg.n_layers, cfg.n_heads).with_gate(1, 2, 0.0);
  std::vector<testing::NaiveSite> zero;
  for (std::size_t t = 0; t < toks.size(); ++t) zero.push_back({1, 2, t});
  const auto oracle = testing::naive_forward(w, toks, std::vector<double>(cfg.n_gates(), 1.0), zero);
  CHECK(max_abs_diff(forward<double>(w64, toks, g).data(), oracle) < 1e-5);

  // Any hard matrix, including fractional values.
  std::vector<double> vals(cfg.n_gates());
  for (auto& v : vals) v = rng.uniform01();
  vals[0] = 0.0;
  vals[5] = 1.0;
  const auto hard = GateMatrix::hard(cfg.n_layers, cfg.n_heads, vals);
  CHECK(max_abs_diff(forward<double>(w64, toks, hard).data(), testing::naive_forward(w, toks, vals)) < 1e-5);
}

TEST_CASE("capture") {
  const auto cfg = testing::small_config();
  const auto w = testing::lively_model(cfg, 14);
  const auto w64 = weights_cast<double>(w);
  Rng rng(4);
  const auto toks = testing::random_tokens(rng, 12, 64);
  const auto g = GateMatrix::soft(cfg.n_layers, cfg.n_heads, random_soft_logits(rng, cfg.n_gates()), 8.0);

  const auto plain = forward<float>(w, toks, g);
  const auto [no_probe_logits, none] = forward_with_capture<float>(w, toks, g, {});
  CHECK(none.values.empty());
  CHECK(std::equal(plain.data().begin(), plain.data().end(), no_probe_logits.data().begin()));

  std::vector<std::vector<std::vector<double>>> blocks;
  testing::naive_forward(w, toks, g.gates(), {}, &blocks);
  const std::vector<HeadSite> probes{{0, 0, 0}, {0, 3, 7}, {1, 1, 11}, {1, 2, 4}};
  const auto [logits, cap] = forward_with_capture<double>(w64, toks, g, probes);
  REQUIRE(cap.values.size() == probes.size());
  for (std::size_t i = 0; i < probes.size(); ++i) {
    CHECK(cap.sites[i] == probes[i]);
    const auto& want = blocks[probes[i].layer * cfg.n_heads + probes[i].head][probes[i].position];
    CHECK(max_abs_diff(cap.values[i], want) < 1e-5);
  }

  const auto zeroed = GateMatrix::ones(cfg.n_layers, cfg.n_heads).with_gate(1, 1, 0.0);
  const std::vector<HeadSite> site{{1, 1, 5}};
  const auto [l2, c2] = forward_with_capture<float>(w, toks, zeroed, site);
  for (double v : c2.values[0]) CHECK(v == 0.0);

  const std::vector<HeadSite> bad{{0, 0, 12}};
  CHECK_THROWS_AS(forward_with_capture<float>(w, toks, g, bad), ProbeError);
  const std::vector<HeadSite> bad_head{{0, 4, 0}};
  CHECK_THROWS_AS(forward_with_capture<float>(w, toks, g, bad_head), ProbeError);
}

TEST_CASE("patch") {
  const auto cfg = testing::small_config();
  const auto w = testing::lively_model(cfg, 15);
  const auto w64 = weights_cast<double>(w);
  Rng rng(5);
  const auto toks = testing::random_tokens(rng, 10, 64);
  const auto ones = GateMatrix::ones(cfg.n_layers, cfg.n_heads);

  SUBCASE("self-patch is the identity") {
    const std::vector<HeadSite> probes{{0, 1, 3}, {1, 3, 9}};
    const auto [logits, cap] = forward_with_capture<float>(w, toks, ones, probes);
    std::vector<HeadPatch> patches;
    for (std::size_t i = 0; i < probes.size(); ++i) patches.push_back({probes[i], cap.values[i]});
    const auto patched = forward_with_patch<float>(w, toks, ones, patches);
    double m = 0.0;
    for (std::size_t i = 0; i < logits.numel(); ++i)
      m = std::max(m, std::abs(static_cast<double>(logits.data()[i]) - patched.data()[i]));
    CHECK(m < 1e-6);
  }

  SUBCASE("zero patch equals gating that head off at one position") {
    const std::vector<HeadPatch> patch{{{1, 0, 6}, std::vector<double>(cfg.d_head(), 0.0)}};
    const auto got = forward_with_patch<double>(w64, toks, ones, patch);
    const auto want = testing::naive_forward(w, toks, std::vector<double>(cfg.n_gates(), 1.0), {{1, 0, 6}});
    CHECK(max_abs_diff(got.data(), want) < 1e-5);
  }

  SUBCASE("one-layer model with every head patched from another run") {
    const auto c1 = testing::small_config(1, 4, 16);
    const auto w1 = testing::lively_model(c1, 16);
    const auto w1d = weights_cast<double>(w1);
    const auto a = testing::random_tokens(rng, 9, 64);
    const auto b = testing::random_tokens(rng, 9, 64);
    const auto ones1 = GateMatrix::ones(1, 4);
    std::vector<HeadSite> sites;
    for (std::size_t h = 0; h < 4; ++h)
      for (std::size_t t = 0; t < a.size(); ++t) sites.push_back({0, h, t});
    const auto [la, cap] = forward_with_capture<double>(w1d, a, ones1, sites);
    std::vector<HeadPatch> patches;
    for (std::size_t i = 0; i < sites.size(); ++i) patches.push_back({sites[i], cap.values[i]});
    const auto got = forward_with_patch<double>(w1d, b, ones1, patches);
    // With one layer, B's run now depends on A only through the attention
    // outputs: residual and MLP still see B's embeddings.
    std::vector<std::vector<std::vector<double>>> blocks_a;
    testing::naive_forward(w1, a, std::vector<double>(4, 1.0), {}, &blocks_a);
    const auto want = testing::naive_forward(w1, b, std::vector<double>(4, 1.0), {}, nullptr, &blocks_a);
    CHECK(max_abs_diff(got.data(), want) < 1e-5);
  }

  SUBCASE("patch errors") {
    const std::vector<HeadPatch> short_vec{{{0, 0, 0}, std::vector<double>(cfg.d_head() - 1, 0.0)}};
    CHECK_THROWS_AS(forward_with_patch<float>(w, toks, ones, short_vec), PatchError);
    const std::vector<HeadPatch> out_of_range{{{2, 0, 0}, std::vector<double>(cfg.d_head(), 0.0)}};
    CHECK_THROWS_AS(forward_with_patch<float>(w, toks, ones, out_of_range), PatchError);
  }
}

TEST_CASE("changing a gate leaves lower layers untouched") {
  const auto cfg = testing::small_config(3, 4, 16);
  const auto w = testing::lively_model(cfg, 17);
  Rng rng(6);
  const auto toks = testing::random_tokens(rng, 14, 64);
  const auto base = GateMatrix::soft(cfg.n_layers, cfg.n_heads, random_soft_logits(rng, cfg.n_gates()), 8.0);
  std::vector<double> changed = base.logits();
  changed[2 * cfg.n_heads + 1] = -5.0;
  const auto moved = GateMatrix::soft(cfg.n_layers, cfg.n_heads, changed, 8.0);
  std::vector<HeadSite> lower;
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < cfg.n_heads; ++h)
      for (std::size_t t = 0; t < toks.size(); ++t) lower.push_back({l, h, t});
  const auto [la, ca] = forward_with_capture<float>(w, toks, base, lower);
  const auto [lb, cb] = forward_with_capture<float>(w, toks, moved, lower);
  CHECK(ca.values == cb.values);
}

TEST_CASE("causality under token mutation") {
  const auto cfg = testing::small_config();
  const auto w = testing::lively_model(cfg, 18);
  const auto g = GateMatrix::ones(cfg.n_layers, cfg.n_heads);
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    auto toks = testing::random_tokens(rng, 20, 64);
    const auto t = rng.uniform_index(19);
    const auto before = forward<float>(w, toks, g);
    for (auto i = t + 1; i < toks.size(); ++i) toks[i] = static_cast<int>(rng.uniform_index(64));
    const auto after = forward<float>(w, toks, g);
    const auto n = (t + 1) * cfg.vocab_size;
    CHECK(std::equal(before.data().begin(), before.data().begin() + static_cast<std::ptrdiff_t>(n), after.data().begin()));
  }
}

TEST_CASE("packed segments do not attend across boundaries") {
  const auto cfg = testing::small_config();
  const auto w = testing::lively_model(cfg, 19);
  Rng rng(8);
  const auto a = testing::random_tokens(rng, 9, 64);
  const auto b = testing::random_tokens(rng, 13, 64);
  PackedSequences packed;
  packed.append(a);
  packed.append(b);
  Tape<double> tape;
  const auto w64 = weights_cast<double>(w);
  const auto both = forward_packed<double>(tape, w64, packed, nullptr);
  const auto alone = forward_ungated<double>(w64, b);
  double m = 0.0;
  for (std::size_t i = 0; i < alone.numel(); ++i) m = std::max(m, std::abs(alone.data()[i] - both.data()[a.size() * cfg.vocab_size + i]));
  CHECK(m < 1e-9);
}

TEST_CASE("forward errors") {
  const auto cfg = testing::small_config();
  const auto w = init_weights(cfg, 1);
  const auto g = GateMatrix::ones(cfg.n_layers, cfg.n_heads);
  const std::vector<int> bad{1, 2, 64};
  CHECK_THROWS_AS(forward<float>(w, bad, g), VocabularyError);
  const std::vector<int> too_long(cfg.max_seq_len + 1, 3);
  CHECK_THROWS_AS(forward<float>(w, too_long, g), DimensionError);
  const std::vector<int> ok{1, 2, 3};
  CHECK_THROWS_AS(forward<float>(w, ok, GateMatrix::ones(3, 4)), DimensionError);
}

TEST_CASE("config and gate matrix validation") {
  auto cfg = testing::small_config();
  cfg.n_heads = 5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = testing::small_config();
  cfg.d_ff = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(GateMatrix::hard(1, 2, {0.5, 1.5}), DimensionError);
  CHECK_THROWS_AS(GateMatrix::soft(1, 2, {0.0}, 8.0), DimensionError);

  const auto soft = GateMatrix::soft(1, 3, {-20.0, 0.0, 20.0}, 8.0);
  CHECK(soft.gate(0, 0) > 0.0);
  CHECK(soft.gate(0, 2) < 1.0);
  CHECK(soft.gate(0, 0) == doctest::Approx(sigmoid_scalar(-8.0)));
  CHECK(soft.gate(0, 1) == 0.5);
}

TEST_CASE("planted head emits exact zeros") {
  const auto cfg = testing::small_config();
  auto w = testing::lively_model(cfg, 20);
  plant_irrelevant_head(w, 1, 3);
  Rng rng(9);
  const auto toks = testing::random_tokens(rng, 8, 64);
  std::vector<HeadSite> sites;
  for (std::size_t t = 0; t < toks.size(); ++t) sites.push_back({1, 3, t});
  const auto [l, cap] = forward_with_capture<float>(w, toks, GateMatrix::ones(2, 4), sites);
  for (const auto& v : cap.values)
    for (double x : v) CHECK(x == 0.0);
  CHECK_THROWS_AS(plant_irrelevant_head(w, 2, 0), ConfigError);
}

TEST_CASE("init is seeded and deterministic") {
  const auto cfg = testing::small_config();
  CHECK(bitwise_equal(init_weights(cfg, 5), init_weights(cfg, 5)));
  CHECK_FALSE(bitwise_equal(init_weights(cfg, 5), init_weights(cfg, 6)));
}

TEST_CASE("checkpoint round-trip and corruption") {
  const auto cfg = testing::small_config();
  const auto w = testing::lively_model(cfg, 21);
  const auto bytes = serialize_checkpoint(w);
  CHECK(bitwise_equal(deserialize_checkpoint(bytes), w));
  CHECK(deserialize_checkpoint(bytes).config == cfg);

  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), IntegrityError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(bad_magic), IntegrityError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes + "junk"), IntegrityError);

  const auto dir = std::filesystem::temp_directory_path() / "chg_model_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "c.bin", w);
  CHECK(bitwise_equal(load_checkpoint(dir / "c.bin"), w));
  CHECK_THROWS_AS(load_checkpoint(dir / "absent.bin"), MissingArtifactError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("target_logprob") {
  // Zero unembedding gives a uniform next-token distribution.
  const auto cfg = testing::small_config(2, 4, 16, 16, 16);
  auto w = init_weights(cfg, 3);
  for (auto& x : w.unembed.mutable_data()) x = 0.0f;
  TaskBatch batch{"manual", PromptFormat::icl, 0, {}};
  Example ex;
  ex.tokens = {0, 5, 6, 7, 8, 9};
  ex.target_mask = {0, 0, 0, 1, 1, 1};
  ex.answer = {7, 8, 9};
  batch.examples = {ex, ex};
  const auto lp = target_logprob<float>(w, batch, static_cast<const GateMatrix*>(nullptr));
  CHECK(lp[0] == doctest::Approx(-3.0 * std::log(16.0)).epsilon(1e-6));
  CHECK(lp[0] == lp[1]);

  // Consistency with the tape cross-entropy on a lively model.
  const auto lw = testing::lively_model(cfg, 22);
  Rng rng(10);
  TaskBatch rb{"manual", PromptFormat::icl, 0, {}};
  for (int i = 0; i < 4; ++i) {
    Example e;
    e.tokens = testing::random_tokens(rng, 10, 16);
    e.target_mask.assign(10, 0);
    for (std::size_t t = 7; t < 10; ++t) {
      e.target_mask[t] = 1;
      e.answer.push_back(e.tokens[t]);
    }
    rb.examples.push_back(e);
  }
  const auto g = GateMatrix::soft(2, 4, random_soft_logits(rng, 8), 8.0);
  const auto scores = target_logprob<float>(lw, rb, g);
  double total = 0.0;
  for (double s : scores) {
    CHECK(std::exp(s / 3.0) > 0.0);
    CHECK(std::exp(s / 3.0) < 1.0);
    total += s;
  }
  const auto lb = pack_for_loss(rb);
  Tape<float> tape;
  const auto gv = gate_values<float>(g);
  const auto ce = cross_entropy(tape, forward_packed<float>(tape, lw, lb.seqs, &gv), lb.targets, lb.mask);
  CHECK(std::abs(total + ce.item() * static_cast<double>(lb.n_target_tokens)) < 1e-5 * std::max(1.0, std::abs(total)));

  TaskBatch empty_mask{"manual", PromptFormat::icl, 0, {}};
  Example e0;
  e0.tokens = {1, 2, 3};
  e0.target_mask = {0, 0, 0};
  empty_mask.examples = {e0};
  CHECK_THROWS_AS(target_logprob<float>(lw, empty_mask, g), InvalidBatchError);
}

}  // TEST_SUITE

TEST_SUITE("model") {

TEST_CASE("weight gradients of the full model match central differences") {
  const auto cfg = testing::small_config(2, 4, 8, 64, 16);
  const auto w32 = testing::lively_model(cfg, 23);
  auto w = weights_cast<double>(w32);
  for (auto t : w.parameters())
    for (auto& x : t.mutable_data()) x *= 0.2;
  Rng rng(11);
  const auto toks = testing::random_tokens(rng, 7, 64);
  PackedSequences seqs;
  seqs.append(std::span<const int>(toks).first(6));
  std::vector<int> targets(toks.begin() + 1, toks.end());
  const std::vector<std::uint8_t> mask(6, 1);
  const auto g = gate_values<double>(GateMatrix::soft(2, 4, random_soft_logits(rng, 8), 8.0));
  auto loss_of = [&](const Weights<double>& ww) {
    Tape<double> tape;
    return cross_entropy(tape, forward_packed<double>(tape, ww, seqs, &g), targets, mask).item();
  };
  w.set_requires_grad(true);
  Tape<double> tape;
  const auto loss = cross_entropy(tape, forward_packed<double>(tape, w, seqs, &g), targets, mask);
  tape.backward(loss);
  for (const auto& [name, t] : w.named()) {
    auto data = t;
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < t.numel(); i += 1 + t.numel() / 12) {
      const double x0 = data.mutable_data()[i];
      data.mutable_data()[i] = x0 + 1e-5;
      const double up = loss_of(w);
      data.mutable_data()[i] = x0 - 1e-5;
      const double down = loss_of(w);
      data.mutable_data()[i] = x0;
      fd.push_back((up - down) / 2e-5);
      an.push_back(t.grad()[i]);
    }
    INFO(name);
    CHECK(testing::rel_err(an, fd) < 1e-6);
  }
}

}  // TEST_SUITE
