#pragma once

// Benchmark harness: a theme/subject/testpoint taxonomy, prompt-spec
// sampling, a deterministic rule judge, and pass-rate aggregation.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "prefgrpo/errors.hpp"
#include "prefgrpo/rng.hpp"

namespace prefgrpo {

struct Theme {
  std::string name;
  std::vector<std::string> subthemes;
};

struct PrimaryDimension {
  std::string name;
  std::vector<std::string> subs;
};

class Taxonomy {
 public:
  Taxonomy() = default;
  Taxonomy(std::vector<Theme> themes, std::vector<std::string> subjects, std::vector<PrimaryDimension> dims)
      : themes_(std::move(themes)), subjects_(std::move(subjects)), dims_(std::move(dims)) {
    if (themes_.empty()) throw ContractError("taxonomy needs at least one theme");
    if (subjects_.empty()) throw ContractError("taxonomy needs at least one subject");
    if (dims_.empty()) throw ContractError("taxonomy needs at least one primary dimension");
    std::set<std::string> seen;
    for (std::size_t p = 0; p < dims_.size(); ++p) {
      if (dims_[p].subs.empty())
        throw ContractError(fmt::format("primary dimension '{}' has no sub-dimensions", dims_[p].name));
      if (!seen.insert(dims_[p].name).second)
        throw ContractError(fmt::format("duplicate dimension name '{}'", dims_[p].name));
      for (const auto& s : dims_[p].subs) {
        // A sub may share its primary's name (e.g. Style/Style) but nothing else.
        if (s != dims_[p].name && !seen.insert(s).second)
          throw ContractError(fmt::format("duplicate dimension name '{}'", s));
        if (!owner_.emplace(s, p).second) throw ContractError(fmt::format("duplicate sub-dimension '{}'", s));
        subs_.push_back(s);
      }
    }
  }

  const std::vector<Theme>& themes() const noexcept { return themes_; }
  const std::vector<std::string>& subjects() const noexcept { return subjects_; }
  const std::vector<PrimaryDimension>& primaries() const noexcept { return dims_; }
  /// Every sub-dimension in declaration order.
  const std::vector<std::string>& subs() const noexcept { return subs_; }

  std::size_t subtheme_count() const {
    std::size_t n = 0;
    for (const auto& t : themes_) n += t.subthemes.size();
    return n;
  }

  bool has_sub(std::string_view s) const { return owner_.find(std::string(s)) != owner_.end(); }

  const std::string& primary_of(std::string_view sub) const {
    const auto it = owner_.find(std::string(sub));
    if (it == owner_.end()) throw ContractError(fmt::format("unknown sub-dimension '{}'", sub));
    return dims_[it->second].name;
  }

 private:
  std::vector<Theme> themes_;
  std::vector<std::string> subjects_;
  std::vector<PrimaryDimension> dims_;
  std::vector<std::string> subs_;
  std::map<std::string, std::size_t> owner_;
};

inline nlohmann::json taxonomy_to_json(const Taxonomy& t) {
  nlohmann::json themes = nlohmann::json::array();
  for (const auto& th : t.themes()) themes.push_back({{"name", th.name}, {"subthemes", th.subthemes}});
  nlohmann::json dims = nlohmann::json::array();
  for (const auto& d : t.primaries()) dims.push_back({{"name", d.name}, {"subs", d.subs}});
  return {{"themes", themes}, {"subjects", t.subjects()}, {"dimensions", dims}};
}

inline Taxonomy taxonomy_from_json(const nlohmann::json& j) {
  try {
    std::vector<Theme> themes;
    for (const auto& th : j.at("themes"))
      themes.push_back({th.at("name").get<std::string>(), th.value("subthemes", std::vector<std::string>{})});
    std::vector<PrimaryDimension> dims;
    for (const auto& d : j.at("dimensions"))
      dims.push_back({d.at("name").get<std::string>(), d.at("subs").get<std::vector<std::string>>()});
    return Taxonomy(std::move(themes), j.at("subjects").get<std::vector<std::string>>(), std::move(dims));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed taxonomy: ") + e.what());
  }
}

/// The built-in taxonomy: 5 themes with 4 subthemes each, 5 subjects and
/// 10 primary dimensions owning 27 sub-dimensions.
inline Taxonomy default_taxonomy() {
  std::vector<Theme> themes = {
      {"Art", {"Painting", "Sculpture", "Photography", "Calligraphy"}},
      {"Illustration", {"Children's book", "Comics", "Scientific", "Concept art"}},
      {"Creative Divergence", {"Surreal", "Fantasy", "Futurism", "Dreamscape"}},
      {"Design", {"Poster", "Product", "Interior", "Logo"}},
      {"Film&Storytelling", {"Scene still", "Storyboard", "Character portrait", "Documentary"}},
  };
  std::vector<std::string> subjects = {"animals", "objects", "anthropomorphic characters", "scenes", "Other"};
  std::vector<PrimaryDimension> dims = {
      {"Style", {"Style"}},
      {"World Knowledge", {"World Knowledge"}},
      {"Attribute", {"Color", "Shape", "Size", "Material", "Expression", "Quantity"}},
      {"Action", {"Hand", "Full body", "Animal", "Non-contact interaction", "Contact interaction", "State"}},
      {"Relationship", {"Composition", "Similarity", "Inclusion", "Comparison"}},
      {"Compound", {"Imagination", "Feature matching"}},
      {"Grammar", {"Pronoun reference", "Consistency", "Negation"}},
      {"Layout", {"2D", "3D"}},
      {"Logical Reasoning", {"Logical reasoning"}},
      {"Text", {"Text generation"}},
  };
  return Taxonomy(std::move(themes), std::move(subjects), std::move(dims));
}

// ---------------------------------------------------------------------------
// Prompt specs

struct PromptSpec {
  std::uint64_t id = 0;
  std::string theme;
  std::string subtheme;
  std::string subject;
  std::vector<std::string> testpoints;
  std::optional<std::string> prompt;
  std::vector<std::string> descriptions;  // empty until generated

  bool operator==(const PromptSpec&) const = default;
};

inline constexpr std::size_t kMaxTestpoints = 5;

/// Theme, subject and k uniform; k testpoints drawn without replacement.
inline PromptSpec sample_prompt_spec(const Taxonomy& tax, std::uint64_t seed, std::uint64_t id = 0) {
  const auto& subs = tax.subs();
  if (subs.size() < kMaxTestpoints)
    throw ContractError(fmt::format("taxonomy needs at least {} sub-dimensions, has {}", kMaxTestpoints, subs.size()));
  Engine eng = make_engine({seed, id, 0xbe7cULL});
  auto pick = [&eng](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(eng); };
  PromptSpec s;
  s.id = id;
  const auto& theme = tax.themes()[pick(tax.themes().size())];
  s.theme = theme.name;
  if (!theme.subthemes.empty()) s.subtheme = theme.subthemes[pick(theme.subthemes.size())];
  s.subject = tax.subjects()[pick(tax.subjects().size())];
  const std::size_t k = 1 + pick(kMaxTestpoints);
  std::vector<std::size_t> idx(subs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + pick(idx.size() - i)]);
  for (std::size_t i = 0; i < k; ++i) s.testpoints.push_back(subs[idx[i]]);
  return s;
}

inline nlohmann::json prompt_spec_to_json(const PromptSpec& s) {
  nlohmann::json j = {{"id", s.id},
                      {"theme", s.theme},
                      {"subtheme", s.subtheme},
                      {"subject", s.subject},
                      {"testpoints", s.testpoints},
                      {"descriptions", s.descriptions}};
  j["prompt"] = s.prompt ? nlohmann::json(*s.prompt) : nlohmann::json(nullptr);
  return j;
}

inline PromptSpec prompt_spec_from_json(const nlohmann::json& j) {
  PromptSpec s;
  s.id = j.at("id").get<std::uint64_t>();
  s.theme = j.at("theme").get<std::string>();
  s.subtheme = j.value("subtheme", std::string{});
  s.subject = j.at("subject").get<std::string>();
  s.testpoints = j.at("testpoints").get<std::vector<std::string>>();
  if (j.contains("prompt") && !j.at("prompt").is_null()) s.prompt = j.at("prompt").get<std::string>();
  s.descriptions = j.value("descriptions", std::vector<std::string>{});
  if (s.testpoints.empty() || s.testpoints.size() > kMaxTestpoints)
    throw ContractError(fmt::format("prompt {} has {} testpoints, expected 1..{}", s.id, s.testpoints.size(),
                                    kMaxTestpoints));
  if (!s.descriptions.empty() && s.descriptions.size() != s.testpoints.size())
    throw ContractError(fmt::format("prompt {} has mismatched descriptions", s.id));
  return s;
}

// ---------------------------------------------------------------------------
// Judging

struct TestpointResult {
  std::uint64_t prompt_id = 0;
  std::size_t testpoint = 0;
  std::string sub_dimension;
  int score = 0;
  std::string rationale;

  bool operator==(const TestpointResult&) const = default;
};

inline nlohmann::json result_to_json(const TestpointResult& r) {
  return {{"prompt_id", r.prompt_id},
          {"testpoint", r.testpoint},
          {"sub_dimension", r.sub_dimension},
          {"score", r.score},
          {"rationale", r.rationale}};
}

inline TestpointResult result_from_json(const nlohmann::json& j) {
  TestpointResult r;
  r.prompt_id = j.at("prompt_id").get<std::uint64_t>();
  r.testpoint = j.at("testpoint").get<std::size_t>();
  r.sub_dimension = j.at("sub_dimension").get<std::string>();
  const auto& s = j.at("score");
  if (!s.is_number_integer() || (s.get<int>() != 0 && s.get<int>() != 1))
    throw ContractError(fmt::format("result score must be 0 or 1, got {}", s.dump()));
  r.score = s.get<int>();
  r.rationale = j.value("rationale", std::string{});
  return r;
}

inline void write_results_jsonl(std::ostream& os, std::span<const TestpointResult> results) {
  for (const auto& r : results) os << result_to_json(r).dump() << '\n';
}

inline std::vector<TestpointResult> read_results_jsonl(std::istream& is) {
  std::vector<TestpointResult> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(result_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(fmt::format("results line {}: {}", lineno, e.what()));
    }
  }
  return out;
}

/// Threshold predicate over a sample vector, written "<feature><op><value>".
/// Features: norm, mean, or x<i> for a coordinate.
struct Rule {
  std::string text;
  std::string feature;
  std::string op;
  double threshold = 0.0;
};

inline Rule parse_rule(std::string_view text) {
  static constexpr std::string_view ops[] = {"<=", ">=", "<", ">"};
  for (auto op : ops) {
    const auto pos = text.find(op);
    if (pos == std::string_view::npos || pos == 0) continue;
    Rule r{std::string(text), std::string(text.substr(0, pos)), std::string(op), 0.0};
    const auto num = text.substr(pos + op.size());
    const auto [end, ec] = std::from_chars(num.data(), num.data() + num.size(), r.threshold);
    if (ec != std::errc{} || end != num.data() + num.size() || num.empty()) break;
    const bool coord = r.feature.size() > 1 && r.feature[0] == 'x' &&
                       std::all_of(r.feature.begin() + 1, r.feature.end(), [](char c) { return c >= '0' && c <= '9'; });
    if (r.feature != "norm" && r.feature != "mean" && !coord) break;
    return r;
  }
  throw ContractError(fmt::format("cannot parse judge rule '{}'", text));
}

inline double rule_feature(const Rule& r, std::span<const double> x) {
  if (r.feature == "norm") {
    double s = 0.0;
    for (double v : x) s += v * v;
    return std::sqrt(s);
  }
  if (r.feature == "mean") {
    if (x.empty()) throw ContractError("rule 'mean' needs a non-empty payload");
    return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  }
  const std::size_t i = std::stoul(r.feature.substr(1));
  if (i >= x.size()) throw ContractError(fmt::format("rule '{}' reads past a {}-d payload", r.text, x.size()));
  return x[i];
}

inline bool rule_holds(const Rule& r, double value) {
  if (r.op == "<") return value < r.threshold;
  if (r.op == "<=") return value <= r.threshold;
  if (r.op == ">") return value > r.threshold;
  return value >= r.threshold;
}

/// sub-dimension -> rule text
using RuleTable = std::map<std::string, std::string>;

inline RuleTable rule_table_from_json(const nlohmann::json& j) {
  try {
    return j.get<RuleTable>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("rule table must map sub-dimensions to rule strings: ") + e.what());
  }
}

/// Deterministic stand-in for a multimodal judge.
inline std::vector<TestpointResult> stub_judge(const PromptSpec& spec, std::span<const double> payload,
                                               const RuleTable& rules) {
  std::vector<TestpointResult> out;
  for (std::size_t j = 0; j < spec.testpoints.size(); ++j) {
    const auto& c = spec.testpoints[j];
    const auto it = rules.find(c);
    if (it == rules.end()) throw ContractError(fmt::format("no judge rule for sub-dimension '{}'", c));
    const Rule rule = parse_rule(it->second);
    const double value = rule_feature(rule, payload);
    const bool pass = rule_holds(rule, value);
    out.push_back({spec.id, j, c, pass ? 1 : 0, fmt::format("{}: {}={}", rule.text, rule.feature, value)});
  }
  return out;
}

/// One line of a judging job file: a spec plus what the judge looks at.
struct JudgeJob {
  PromptSpec spec;
  std::vector<double> payload;  // read by the stub judge
  std::string sample_ref;       // forwarded to an external judge
};

inline std::vector<JudgeJob> read_jobs_jsonl(std::istream& is) {
  std::vector<JudgeJob> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({prompt_spec_from_json(j), j.value("payload", std::vector<double>{}),
                     j.value("sample_ref", std::string{})});
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(fmt::format("jobs line {}: {}", lineno, e.what()));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation

struct SubScore {
  std::string primary;
  std::size_t occurrences = 0;
  std::size_t passes = 0;
  std::optional<double> score;  // absent when never tested
};

struct EvalReport {
  std::map<std::string, SubScore> subs;
  std::map<std::string, std::optional<double>> primaries;
  std::optional<double> overall;
};

/// R_c = passes / occurrences; primaries average their tested subs, overall
/// averages the tested primaries. Untested dimensions stay absent.
inline EvalReport aggregate(std::span<const TestpointResult> results, const Taxonomy& tax) {
  EvalReport rep;
  for (const auto& d : tax.primaries())
    for (const auto& s : d.subs) rep.subs[s].primary = d.name;
  for (const auto& r : results) {
    const auto it = rep.subs.find(r.sub_dimension);
    if (it == rep.subs.end()) throw ContractError(fmt::format("unknown sub-dimension '{}'", r.sub_dimension));
    if (r.score != 0 && r.score != 1) throw ContractError("testpoint scores must be 0 or 1");
    ++it->second.occurrences;
    it->second.passes += static_cast<std::size_t>(r.score);
  }
  for (auto& [name, s] : rep.subs)
    if (s.occurrences > 0) s.score = static_cast<double>(s.passes) / static_cast<double>(s.occurrences);

  double total = 0.0;
  std::size_t tested_primaries = 0;
  for (const auto& d : tax.primaries()) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& s : d.subs)
      if (const auto& sc = rep.subs.at(s).score) {
        sum += *sc;
        ++n;
      }
    if (n == 0) {
      rep.primaries[d.name] = std::nullopt;
      continue;
    }
    const double mean = sum / static_cast<double>(n);
    rep.primaries[d.name] = mean;
    total += mean;
    ++tested_primaries;
  }
  if (tested_primaries > 0) rep.overall = total / static_cast<double>(tested_primaries);
  return rep;
}

inline nlohmann::json report_to_json(const EvalReport& rep) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json subs = nlohmann::json::object();
  for (const auto& [name, s] : rep.subs)
    subs[name] = {{"primary", s.primary}, {"occurrences", s.occurrences}, {"passes", s.passes}, {"score", opt(s.score)}};
  nlohmann::json prim = nlohmann::json::object();
  for (const auto& [name, v] : rep.primaries) prim[name] = opt(v);
  return {{"sub_dimensions", subs}, {"primary_dimensions", prim}, {"overall", opt(rep.overall)}};
}

}  // namespace prefgrpo
