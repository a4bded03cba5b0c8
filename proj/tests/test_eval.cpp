#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bleu.hpp"
#include "corpus.hpp"
#include "diagnostics.hpp"
#include "error.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "sweep.hpp"

using namespace qknorm;
namespace fs = std::filesystem;

namespace {

Sentence words(const std::string& s) { return tokenize(s, TokenizerMode::kWhitespace); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Transformer heatmap_model() {
  ModelConfig mc;
  mc.d_model = 16;
  mc.num_heads = 4;
  mc.num_layers = 2;
  mc.src_vocab = 10;
  mc.tgt_vocab = 10;
  return Transformer(mc, 3.0, 5);
}

}  // namespace

TEST_CASE("bleu: identity scores 100") {
  const std::vector<Sentence> refs = {words("the cat sat on the mat"), words("a b c d e")};
  const BleuReport r = bleu(refs, refs);
  CHECK(r.bleu == doctest::Approx(100.0));
  CHECK(r.brevity_penalty == 1.0);
  for (double p : r.precisions) CHECK(p == 1.0);
}

TEST_CASE("bleu: disjoint vocabulary scores 0") {
  CHECK(bleu({words("x y z w")}, {words("a b c d")}).bleu == 0.0);
  CHECK(bleu({{}}, {words("a b c d")}).bleu == 0.0);
}

TEST_CASE("bleu: brevity penalty example") {
  // Candidate is an exact 4-token prefix of a 5-token reference.
  const BleuReport r = bleu({words("a b c d")}, {words("a b c d e")});
  CHECK(r.brevity_penalty == doctest::Approx(std::exp(1.0 - 5.0 / 4.0)));
  CHECK(r.bleu == doctest::Approx(77.8800783071).epsilon(1e-9));
  // Longer than the reference: no penalty.
  CHECK(bleu({words("a b c d e f")}, {words("a b c d e")}).brevity_penalty == 1.0);
}

TEST_CASE("bleu: smoothing of a zero higher-order count") {
  // p1 = 3/4, p2 = 2/3, p3 = 1/2, p4 = 0/1 -> 1/2.
  const BleuReport r = bleu({words("a b c x")}, {words("a b c d")});
  CHECK(r.precisions[3] == doctest::Approx(0.5));
  CHECK(r.bleu == doctest::Approx(59.4603557501).epsilon(1e-9));
}

TEST_CASE("bleu: clipping and corpus-level pooling") {
  const BleuReport r = bleu({words("the the the the")}, {words("the cat")});
  CHECK(r.precisions[0] == doctest::Approx(0.25));
  const std::vector<Sentence> c = {words("a b c d"), words("e f g")};
  const std::vector<Sentence> ref = {words("a b c d"), words("e f h")};
  BleuStats pooled = sentence_stats(c[0], ref[0]);
  pooled += sentence_stats(c[1], ref[1]);
  CHECK(bleu(c, ref).bleu == bleu_from_stats(pooled).bleu);
  CHECK(pooled.matches[0] == 6);
  CHECK(pooled.totals[0] == 7);
}

TEST_CASE("bleu: invariant to sentence order") {
  std::vector<Sentence> c = {words("a b c d"), words("e f g"), words("h i j k l")};
  std::vector<Sentence> r = {words("a b d c"), words("e f g"), words("h i j k")};
  const double base = bleu(c, r).bleu;
  std::swap(c[0], c[2]);
  std::swap(r[0], r[2]);
  CHECK(bleu(c, r).bleu == doctest::Approx(base).epsilon(1e-14));
}

TEST_CASE("bleu: input errors") {
  CHECK_THROWS_AS(bleu({}, {}), Error);
  CHECK_THROWS_AS(bleu({words("a")}, {words("a"), words("b")}), Error);
}

TEST_CASE("bootstrap: identical, dominant and seeded systems") {
  std::vector<Sentence> refs, junk;
  for (int i = 0; i < 20; ++i) {
    refs.push_back(words("w" + std::to_string(i) + " x y z v"));
    junk.push_back(words("q q"));
  }
  const BootstrapResult same = paired_bootstrap(refs, refs, refs, 200, 3);
  CHECK(same.resamples == 200);
  CHECK(same.win_a == 0.0);
  CHECK(same.ties == 1.0);
  CHECK(same.p_value == 1.0);
  const BootstrapResult dom = paired_bootstrap(refs, junk, refs, 200, 3);
  CHECK(dom.win_a == 1.0);
  CHECK(dom.p_value == 0.0);
  CHECK(paired_bootstrap(junk, refs, refs, 200, 3).win_b == 1.0);

  std::vector<Sentence> mixed = refs;
  for (std::size_t i = 0; i < mixed.size(); i += 2) mixed[i] = junk[i];
  std::vector<Sentence> other = refs;
  for (std::size_t i = 1; i < other.size(); i += 3) other[i] = junk[i];
  const BootstrapResult a = paired_bootstrap(mixed, other, refs, 300, 9);
  const BootstrapResult b = paired_bootstrap(mixed, other, refs, 300, 9);
  CHECK(a.win_a == b.win_a);
  CHECK(a.win_b == b.win_b);
  CHECK(a.win_a + a.win_b + a.ties == doctest::Approx(1.0));
  CHECK_THROWS_AS(paired_bootstrap(refs, junk, refs, 0, 1), Error);
  CHECK_THROWS_AS(paired_bootstrap(refs, {}, refs, 10, 1), Error);
}

TEST_CASE("entropy: closed-form rows") {
  const Tensor uniform = Tensor::full({1, 1, 4}, 0.25);
  CHECK(attention_entropy(uniform).mean == doctest::Approx(std::log(4.0)));
  CHECK(attention_entropy(uniform).normalized_mean == doctest::Approx(1.0));
  CHECK(attention_entropy(Tensor::from({1, 1, 4}, {0, 0, 1, 0})).mean == 0.0);
  CHECK(attention_entropy(Tensor::from({1, 1, 4}, {0.5, 0.5, 0, 0})).mean ==
        doctest::Approx(std::log(2.0)));
  // Two heads, two rows each: the mean is over rows then heads.
  const Tensor two = Tensor::from({2, 2, 2}, {1, 0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5});
  const EntropyReport r = attention_entropy(two);
  CHECK(r.per_head[0] == doctest::Approx(std::log(2.0) / 2));
  CHECK(r.per_head[1] == doctest::Approx(std::log(2.0)));
  CHECK(r.mean == doctest::Approx(0.75 * std::log(2.0)));
  // Only the second query row kept.
  CHECK(attention_entropy(two, {0, 1}).per_head[0] == doctest::Approx(std::log(2.0)));
  // Normalization by the visible key count.
  CHECK(attention_entropy(Tensor::from({1, 1, 4}, {0.5, 0.5, 0, 0}), {}, 2).normalized_mean ==
        doctest::Approx(1.0));
}

TEST_CASE("entropy: bounds on random softmax rows") {
  Rng rng(4);
  for (std::size_t n : {2u, 5u, 17u}) {
    std::vector<double> logits(3 * n);
    for (auto& v : logits) v = rng.normal() * 4.0;
    const Tensor w = softmax(Tensor::from({1, 3, n}, logits), 2);
    const EntropyReport r = attention_entropy(w);
    CHECK(r.mean >= 0.0);
    CHECK(r.mean <= std::log(static_cast<double>(n)) + 1e-12);
    CHECK(r.normalized_mean <= 1.0 + 1e-12);
  }
}

TEST_CASE("entropy: rejects weights that are not distributions") {
  CHECK_THROWS_AS(attention_entropy(Tensor::from({1, 1, 2}, {0.5, 0.6})), Error);
  CHECK_THROWS_AS(attention_entropy(Tensor::from({1, 1, 2}, {1.5, -0.5})), Error);
  CHECK_THROWS_AS(attention_entropy(Tensor::from({1, 1, 2}, {NAN, 1.0})), Error);
  CHECK_THROWS_AS(attention_entropy(Tensor::from({2, 2}, {0.5, 0.5, 0.5, 0.5})), Error);
}

TEST_CASE("encoder entropy: g = 0 gives uniform attention") {
  ModelConfig mc;
  mc.d_model = 16;
  mc.num_heads = 2;
  mc.num_layers = 2;
  mc.src_vocab = 10;
  mc.tgt_vocab = 10;
  const Transformer m(mc, 0.0, 1);
  const EntropyReport r = encoder_entropy(m, {{4, 5, 6, kEos}, {7, kEos}});
  // Sentence means ln 4 and ln 2, averaged.
  CHECK(r.mean == doctest::Approx((std::log(4.0) + std::log(2.0)) / 2).epsilon(1e-12));
  CHECK(r.normalized_mean == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("heatmaps: files, manifest and row sums") {
  const Transformer m = heatmap_model();
  const std::vector<std::string> toks = {"a", "b", "c"};
  const auto recs = encoder_heatmaps(m, toks, {4, 5, 6});
  REQUIRE(recs.size() == 8);
  CHECK(recs[5].layer == 1);
  CHECK(recs[5].head == 1);
  CHECK(recs[0].tokens == std::vector<std::string>{"a", "b", "c", "<eos>"});

  const fs::path dir = fs::temp_directory_path() / ("qknorm_heat_" + std::to_string(::rand()));
  const auto files = write_heatmaps(recs, (dir / "nested").string());
  CHECK(files.size() == 9);
  CHECK(files.back() == "manifest.tsv");
  CHECK(fs::exists(dir / "nested" / "layer0_head0.tsv"));
  CHECK(fs::exists(dir / "nested" / "layer1_head3.tsv"));

  std::istringstream grid(slurp(dir / "nested" / "layer1_head2.tsv"));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(grid, line)) {
    std::istringstream cells(line);
    std::string cell;
    double sum = 0.0;
    std::size_t cols = 0;
    while (std::getline(cells, cell, '\t')) {
      sum += std::stod(cell);
      ++cols;
    }
    CHECK(cols == 4);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    ++rows;
  }
  CHECK(rows == 4);

  std::istringstream manifest(slurp(dir / "nested" / "manifest.tsv"));
  std::getline(manifest, line);
  CHECK(line == "file\tlayer\thead\trows\tcols\ttokens");
  std::getline(manifest, line);
  CHECK(line == "layer0_head0.tsv\t0\t0\t4\t4\ta b c <eos>");

  // Same model, same sentence: identical bytes.
  const std::string before = slurp(dir / "nested" / "layer0_head1.tsv");
  write_heatmaps(encoder_heatmaps(heatmap_model(), toks, {4, 5, 6}), (dir / "again").string());
  CHECK(slurp(dir / "again" / "layer0_head1.tsv") == before);
  CHECK(slurp(dir / "again" / "manifest.tsv") == slurp(dir / "nested" / "manifest.tsv"));

  // A directory that cannot be created.
  std::ofstream(dir / "plain") << "x";
  CHECK_THROWS_AS(write_heatmaps(recs, (dir / "plain" / "sub").string()), Error);
  fs::remove_all(dir);
}

TEST_CASE("sweep: variant lists and their effects") {
  auto labels = [](SweepKind k) {
    std::vector<std::string> out;
    for (const auto& v : sweep_variants(k)) out.push_back(v.label);
    return out;
  };
  CHECK(labels(SweepKind::kHeads) == std::vector<std::string>{"2", "4", "8", "16", "32"});
  CHECK(labels(SweepKind::kPercentile) ==
        std::vector<std::string>{"75", "90", "92.5", "95", "97.5", "99", "max"});
  CHECK(labels(SweepKind::kAblation) ==
        std::vector<std::string>{"without-g", "without-layernorm", "without-fixnorm",
                                 "without-fixnorm-or-prenorm", "normalize-v"});
  CHECK(parse_sweep_kind("ablation") == SweepKind::kAblation);
  CHECK(sweep_kind_name(SweepKind::kPercentile) == "percentile");
  CHECK_THROWS_AS(parse_sweep_kind("depth"), Error);

  RunConfig base;
  base.model.g_init = 5.0;
  const auto pct = sweep_variants(SweepKind::kPercentile);
  RunConfig c = base;
  pct.back().apply(c);
  CHECK(c.train.length_percentile == 100.0);
  CHECK_FALSE(c.model.g_init.has_value());

  const auto abl = sweep_variants(SweepKind::kAblation);
  c = base;
  c.model.attention = AttentionKind::kScaledDot;
  abl[0].apply(c);
  CHECK(c.model.attention == AttentionKind::kQKNorm);
  CHECK(*c.model.g_init == 1.0);
  CHECK_FALSE(c.model.g_learnable);
  c = base;
  abl[1].apply(c);
  CHECK(c.model.residual_norm == ResidualNorm::kScaleNorm);
  c = base;
  abl[3].apply(c);
  CHECK_FALSE(c.model.use_fixnorm);
  CHECK(c.model.norm_placement == NormPlacement::kPost);
  c = base;
  abl[4].apply(c);
  CHECK(c.model.normalize_v);
}

TEST_CASE("sweep: TSV layout") {
  SweepRow ok;
  ok.sweep = "heads";
  ok.variant = "4";
  ok.ok = true;
  ok.test_bleu = 12.5;
  ok.epochs = 3;
  SweepRow bad;
  bad.sweep = "heads";
  bad.variant = "32";
  bad.error = "d-model 24 is not divisible by num-heads 32";
  const std::string tsv = format_sweep_tsv({ok, bad});
  std::istringstream in(tsv);
  std::string header, row1, row2;
  std::getline(in, header);
  std::getline(in, row1);
  std::getline(in, row2);
  CHECK(header.rfind("sweep\tvariant\tstatus\ttest_bleu", 0) == 0);
  CHECK(row1.rfind("heads\t4\tok\t12.5000", 0) == 0);
  CHECK(row2.rfind("heads\t32\tFAILED\t-", 0) == 0);
  CHECK(row2.find("not divisible") != std::string::npos);
}
