#include "mifomo/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "mifomo/error.hpp"

namespace mifomo {

namespace {

std::vector<std::size_t> iota_vec(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  std::iota(v.begin(), v.end(), begin);
  return v;
}

std::string fmt(double v, int precision = 17) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

double param_norm(const EncoderParams& p) {
  double s = 0.0;
  p.for_each([&s](const std::string&, const Tensor& t, ParamRole) {
    for (double v : t.data()) s += v * v;
  });
  return std::sqrt(s);
}

void check_loss(const Tensor& loss, const char* phase, std::size_t step, const EncoderParams& params) {
  if (!std::isfinite(loss.item())) {
    throw NumericError(std::string(phase) + ": non-finite loss at step " + std::to_string(step) +
                       " (parameter norm " + fmt(param_norm(params), 6) + ")");
  }
}

/// Flattens [B × H × W × C] patch batches, concatenates them and restores the
/// patch shape.
Tensor stack_patches(std::span<const Tensor> parts) {
  std::vector<Tensor> flat;
  std::size_t rows = 0;
  Shape inner;
  for (const auto& p : parts) {
    if (p.dim(0) == 0) continue;
    inner.assign(p.shape().begin() + 1, p.shape().end());
    flat.push_back(reshape(p, {p.dim(0), p.numel() / p.dim(0)}));
    rows += p.dim(0);
  }
  Tensor cat = concat_rows(flat);
  Shape shape{rows};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return reshape(cat, shape);
}

std::vector<int> offset_labels(std::span<const int> labels, int offset) {
  std::vector<int> out(labels.begin(), labels.end());
  for (int& y : out) y += offset;
  return out;
}

RowLabels raw_row_labels(const Tensor& support_z, std::span<const int> support_labels, const Tensor& query_z,
                         std::size_t n_classes) {
  const Prototypes protos = compute_prototypes(support_z, support_labels, n_classes);
  const Tensor p = classify(query_z, protos);
  RowLabels out;
  out.labels = argmax_rows(p);
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    out.confidence.push_back(p[i * n_classes + static_cast<std::size_t>(out.labels[i])]);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Optimizer

double SgdMomentum::step(EncoderParams& params, const ParamBinding& binding, const Gradients& grads) {
  std::map<std::string, std::size_t> ids(binding.watched().begin(), binding.watched().end());
  double sq = 0.0;
  for (const auto& [name, id] : ids) {
    for (double g : grads.of_id(id).data()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("optimizer: non-finite gradient norm");
  const double factor = (clip_ > 0.0 && norm > clip_) ? clip_ / norm : 1.0;
  params.for_each([&](const std::string& name, Tensor& t, ParamRole) {
    auto it = ids.find(name);
    if (it == ids.end()) return;
    const auto g = grads.of_id(it->second).data();
    auto& v = velocity_[name];
    if (v.empty()) v.assign(g.size(), 0.0);
    std::vector<double> next = t.values();
    for (std::size_t i = 0; i < next.size(); ++i) {
      v[i] = momentum_ * v[i] + factor * g[i];
      next[i] -= lr_ * v[i];
    }
    t = Tensor(t.shape(), std::move(next), true);
  });
  return norm;
}

// ---------------------------------------------------------------------------
// Data

Datasets make_datasets(const RunConfig& cfg) {
  Rng rng = Rng(cfg.seed).fork(1);
  auto [src_raw, tgt_raw] = synth_domain_pair(cfg.generator, rng);
  Datasets d;
  d.source = apply_pca(fit_pca(src_raw, cfg.pca_bands), src_raw);
  d.target = apply_pca(fit_pca(tgt_raw, cfg.pca_bands), tgt_raw);
  d.source.patch_radius = d.target.patch_radius = cfg.encoder.patch_radius;
  return d;
}

Tensor embed_pixels(const EncoderParams& params, const CubeDataset& ds, std::span<const std::size_t> pixels,
                    std::size_t batch) {
  const std::size_t d = params.config.embed_dim;
  std::vector<double> out;
  out.reserve(pixels.size() * d);
  for (std::size_t lo = 0; lo < pixels.size(); lo += batch) {
    const std::size_t hi = std::min(pixels.size(), lo + batch);
    const Tensor z = encode_batch(extract_patches(ds, pixels.subspan(lo, hi - lo)), params).z;
    out.insert(out.end(), z.data().begin(), z.data().end());
  }
  return Tensor({pixels.size(), d}, std::move(out));
}

// ---------------------------------------------------------------------------
// Source phase

SourcePhaseResult run_source_phase(const RunConfig& cfg, const CubeDataset& source) {
  cfg.validate();
  if (!source.has_labels()) throw ContractError("run_source_phase: source dataset has no labels");
  Rng init_rng = Rng(cfg.seed).fork(2);
  Rng rng = Rng(cfg.seed).fork(3);
  SourcePhaseResult res;
  res.params = init_encoder(cfg.encoder, init_rng);
  const bool warm = cfg.warmup_episodes > 0;
  res.params.set_phase(warm ? TrainPhase::Warmup : TrainPhase::Adaptation);
  SgdMomentum opt(warm ? cfg.warmup_lr : cfg.lr, cfg.momentum, cfg.clip_norm);

  const LabeledPool pool = labeled_pool(source);
  const std::size_t n = cfg.ways(), k = cfg.k_shot, q = cfg.q_query;
  for (std::size_t e = 0; e < cfg.source_episodes; ++e) {
    if (warm && e == cfg.warmup_episodes) {
      res.params.set_phase(TrainPhase::Adaptation);
      opt = SgdMomentum(cfg.lr, cfg.momentum, cfg.clip_norm);
    }
    const Episode ep = sample_episode(pool, n, k, q, rng);
    std::vector<std::size_t> ids = ep.support_ids();
    const auto qids = ep.query_ids();
    ids.insert(ids.end(), qids.begin(), qids.end());
    const Tensor patches = extract_patches(source, ids);
    const MixPlan plan = draw_mix_plan(n * q, cfg.mixup.beta_alpha, rng);

    Tape tape;
    ParamBinding bind(res.params, tape);
    const Tensor z = encode_batch(patches, bind.bound()).z;
    const auto sl = ep.support_labels(), ql = ep.query_labels();
    const auto sidx = iota_vec(0, n * k), qidx = iota_vec(n * k, n * (k + q));
    const SourceLoss loss = source_phase_loss(gather_rows(z, sidx), sl, gather_rows(z, qidx), ql, n, plan);
    check_loss(loss.total, "source phase", e, res.params);
    res.losses.push_back(loss.total.item());
    opt.step(res.params, bind, tape.backward(loss.total));
  }
  res.params.set_phase(TrainPhase::Adaptation);
  return res;
}

// ---------------------------------------------------------------------------
// Target phase

TargetSupport sample_target_support(const CubeDataset& target, std::size_t k_shot, Rng& rng) {
  const LabeledPool pool = labeled_pool(target);
  TargetSupport s;
  for (std::size_t c = 1; c <= target.n_classes(); ++c) {
    auto it = pool.members.find(static_cast<int>(c));
    const std::size_t have = it == pool.members.end() ? 0 : it->second.size();
    if (have < k_shot) {
      throw SamplingError("target class " + std::to_string(c) + " (" + target.class_names[c - 1] + ") has " +
                          std::to_string(have) + " labeled pixels, need " + std::to_string(k_shot));
    }
    std::vector<std::size_t> ids = it->second;
    for (std::size_t i = 0; i < k_shot; ++i) std::swap(ids[i], ids[i + rng.below(ids.size() - i)]);
    for (std::size_t i = 0; i < k_shot; ++i) {
      s.pixels.push_back(ids[i]);
      s.labels.push_back(static_cast<int>(c - 1));
    }
  }
  return s;
}

IntermediateResult run_intermediate_phase(const RunConfig& cfg, const EncoderParams& checkpoint,
                                          const CubeDataset& source, const CubeDataset& target,
                                          const TargetSupport& support, bool smoothing, Rng& rng) {
  cfg.validate();
  IntermediateResult res;
  res.params = checkpoint;
  res.params.set_phase(TrainPhase::Adaptation);
  SgdMomentum opt(cfg.lr, cfg.momentum, cfg.clip_norm);

  const std::size_t n = cfg.ways(), k = cfg.k_shot, q = cfg.q_query;
  const std::size_t ct = target.n_classes();
  const std::size_t n_union = n + ct;
  const LabeledPool src_pool = labeled_pool(source);

  const std::set<std::size_t> support_set(support.pixels.begin(), support.pixels.end());
  std::vector<std::size_t> candidates;
  // The unlabeled query pool is the evaluation set: annotated pixels outside
  // the support. Only membership is used here, never the label values.
  for (std::size_t p = 0; p < target.pixels(); ++p) {
    if (target.labels[p] != 0 && !support_set.count(p)) candidates.push_back(p);
  }
  const std::size_t n_cand = std::min(cfg.pseudo_batch, candidates.size());

  MixupSchedule schedule;
  schedule.total = cfg.e_outer;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.e_outer; ++epoch) {
    double lambda_sum = 0.0;
    std::size_t lambda_count = 0;
    Tensor last_mix, last_src, last_tgt;
    for (std::size_t inner = 0; inner < cfg.e_inner; ++inner, ++step) {
      // Pseudo-labels for a random unlabeled batch, then top-k per class.
      for (std::size_t i = 0; i < n_cand; ++i) std::swap(candidates[i], candidates[i + rng.below(candidates.size() - i)]);
      const std::vector<std::size_t> cand(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(n_cand));
      const Tensor z_sup0 = embed_pixels(res.params, target, support.pixels, cfg.embed_batch);
      const Tensor z_cand = embed_pixels(res.params, target, cand, cfg.embed_batch);
      const RowLabels rows = smoothing ? smooth_labels(z_sup0, support.labels, z_cand, ct, cfg.propagation).rows
                                       : raw_row_labels(z_sup0, support.labels, z_cand, ct);
      const std::vector<Selected> sel = select_topk(rows, cfg.topk());

      // Target episode: support and query drawn from support ∪ selected.
      std::vector<std::vector<std::size_t>> pool_c(ct);
      for (std::size_t i = 0; i < support.pixels.size(); ++i) {
        pool_c[static_cast<std::size_t>(support.labels[i])].push_back(support.pixels[i]);
      }
      std::vector<std::size_t> per_class_sel(ct, 0);
      for (const auto& s : sel) {
        pool_c[static_cast<std::size_t>(s.label)].push_back(cand[s.index]);
        ++per_class_sel[static_cast<std::size_t>(s.label)];
      }
      std::vector<std::size_t> t_sup, t_qry;
      std::vector<int> t_sup_l, t_qry_l;
      for (std::size_t c = 0; c < ct; ++c) {
        auto& pc = pool_c[c];
        rng.shuffle(pc);
        const std::size_t ks = std::min(k, pc.size() - 1);
        const std::size_t kq = std::min(q, pc.size() - ks);
        for (std::size_t i = 0; i < ks; ++i) {
          t_sup.push_back(pc[i]);
          t_sup_l.push_back(static_cast<int>(c));
        }
        for (std::size_t i = 0; i < kq; ++i) {
          t_qry.push_back(pc[ks + i]);
          t_qry_l.push_back(static_cast<int>(c));
        }
      }
      {
        std::ostringstream audit;
        audit << "epoch=" << epoch << " episode=" << inner << " selected=";
        for (std::size_t c = 0; c < ct; ++c) audit << (c ? "," : "") << per_class_sel[c];
        res.audit.push_back(audit.str());
      }

      const Episode ep = sample_episode(src_pool, n, k, q, rng);
      const MixPlan cross = draw_cross_plan(n * q, t_qry.size(), schedule.lambda2, cfg.mixup.sigma_perturb, rng);
      for (double l : cross.lambdas) lambda_sum += l;
      lambda_count += cross.lambdas.size();
      const SupportSplit split = split_support(support.labels, cfg.k_s, cfg.k_q, rng);
      const MixPlan split_plan = draw_mix_plan(split.sub_query.size(), cfg.mixup.beta_alpha, rng);

      const Tensor src_sup_p = extract_patches(source, ep.support_ids());
      const Tensor src_qry_p = extract_patches(source, ep.query_ids());
      const Tensor tgt_sup_p = extract_patches(target, t_sup);
      const Tensor tgt_qry_p = extract_patches(target, t_qry);
      const Tensor true_sup_p = extract_patches(target, support.pixels);
      const Tensor mixed_p =
          mix_rows(gather_rows(reshape(src_qry_p, {src_qry_p.dim(0), src_qry_p.numel() / src_qry_p.dim(0)}), cross.first),
                   gather_rows(reshape(tgt_qry_p, {tgt_qry_p.dim(0), tgt_qry_p.numel() / tgt_qry_p.dim(0)}), cross.second),
                   cross.lambdas);
      const Tensor mixed_p4 = reshape(mixed_p, {cross.lambdas.size(), src_qry_p.dim(1), src_qry_p.dim(2), src_qry_p.dim(3)});
      const Tensor parts[] = {src_sup_p, src_qry_p, tgt_sup_p, tgt_qry_p, true_sup_p, mixed_p4};

      std::size_t off = 0;
      auto take = [&off](std::size_t count) {
        auto v = iota_vec(off, off + count);
        off += count;
        return v;
      };
      const auto r_src_sup = take(src_sup_p.dim(0)), r_src_qry = take(src_qry_p.dim(0));
      const auto r_tgt_sup = take(t_sup.size()), r_tgt_qry = take(t_qry.size());
      const auto r_true = take(support.pixels.size()), r_mix = take(cross.lambdas.size());

      Tape tape;
      ParamBinding bind(res.params, tape);
      const Tensor z = encode_batch(stack_patches(parts), bind.bound()).z;
      const Tensor z_src_sup = gather_rows(z, r_src_sup), z_src_qry = gather_rows(z, r_src_qry);
      const Tensor z_tgt_sup = gather_rows(z, r_tgt_sup), z_tgt_qry = gather_rows(z, r_tgt_qry);
      const Tensor z_true = gather_rows(z, r_true), z_mix = gather_rows(z, r_mix);

      // Union class space: source episode classes first, then target classes.
      std::vector<int> proto_labels = ep.support_labels();
      const auto tl = offset_labels(t_sup_l, static_cast<int>(n));
      proto_labels.insert(proto_labels.end(), tl.begin(), tl.end());
      const Tensor sup_parts[] = {z_src_sup, z_tgt_sup};
      const Prototypes protos = compute_prototypes(concat_rows(sup_parts), proto_labels, n_union);
      const Tensor y_src = gather_rows(one_hot(ep.query_labels(), n_union), cross.first);
      const Tensor y_tgt = gather_rows(one_hot(offset_labels(t_qry_l, static_cast<int>(n)), n_union), cross.second);
      const IntermediateLoss inter = intermediate_phase_loss(protos, z_mix, gather_rows(z_src_qry, cross.first),
                                                             gather_rows(z_tgt_qry, cross.second), y_src, y_tgt,
                                                             cross.lambdas);
      std::vector<int> ss_l, sq_l;
      for (auto i : split.sub_support) ss_l.push_back(support.labels[i]);
      for (auto i : split.sub_query) sq_l.push_back(support.labels[i]);
      const SourceLoss target_loss = source_phase_loss(gather_rows(z_true, split.sub_support), ss_l,
                                                       gather_rows(z_true, split.sub_query), sq_l, ct, split_plan);
      const Tensor total = add(inter.total, target_loss.total);
      check_loss(total, "intermediate phase", step, res.params);
      res.losses.push_back(total.item());
      opt.step(res.params, bind, tape.backward(total));

      last_mix = z_mix.detach();
      last_src = z_src_qry.detach();
      last_tgt = z_tgt_qry.detach();
    }

    ScheduleTraceRow row;
    row.step = epoch;
    row.lambda2 = schedule.lambda2;
    row.lambda2_perturbed = lambda_count ? lambda_sum / static_cast<double>(lambda_count) : schedule.lambda2;
    if (cfg.e_inner > 0 && last_mix.rank() == 2 && last_mix.dim(0) > 0 && last_tgt.dim(0) > 0) {
      // Matched sizes by random subsampling.
      const std::size_t m = std::min({last_mix.dim(0), last_src.dim(0), last_tgt.dim(0)});
      auto subsample = [&](const Tensor& t) {
        std::vector<std::size_t> idx = iota_vec(0, t.dim(0));
        rng.shuffle(idx);
        idx.resize(m);
        return gather_rows(t, idx);
      };
      const Tensor mix_m = subsample(last_mix), src_m = subsample(last_src), tgt_m = subsample(last_tgt);
      row.d_source = domain_distance(mix_m, src_m, cfg.mixup.projections, rng);
      row.d_target = domain_distance(mix_m, tgt_m, cfg.mixup.projections, rng);
      schedule = update_schedule(schedule, row.d_source, row.d_target, cfg.mixup.tau);
    }
    row.q = schedule.q;
    res.schedule.push_back(row);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation

TrialResult evaluate_support(const RunConfig& cfg, const EncoderParams& params, const CubeDataset& target,
                             const TargetSupport& support, bool smoothing, Rng& rng,
                             std::vector<std::uint32_t>* prediction_map) {
  if (!target.has_labels()) throw ContractError("evaluate: target dataset has no labels");
  const std::size_t ct = target.n_classes();
  const std::set<std::size_t> support_set(support.pixels.begin(), support.pixels.end());
  std::vector<std::size_t> scored;
  for (std::size_t p = 0; p < target.pixels(); ++p) {
    if (target.labels[p] != 0 && !support_set.count(p)) scored.push_back(p);
  }
  for (auto p : scored) {
    if (support_set.count(p)) throw ContractError("evaluate: support pixel in the scored set");
  }
  const Tensor z_sup = embed_pixels(params, target, support.pixels, cfg.embed_batch);
  std::vector<int> pred(scored.size(), -1);
  if (!smoothing) {
    const Tensor z = embed_pixels(params, target, scored, cfg.embed_batch);
    pred = nearest_prototype_labels(z_sup, support.labels, z, ct);
  } else {
    std::vector<std::size_t> order = iota_vec(0, scored.size());
    rng.shuffle(order);
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.smoothing_batch) {
      const std::size_t hi = std::min(order.size(), lo + cfg.smoothing_batch);
      std::vector<std::size_t> px;
      for (std::size_t i = lo; i < hi; ++i) px.push_back(scored[order[i]]);
      const Tensor z = embed_pixels(params, target, px, cfg.embed_batch);
      const RowLabels rows = smooth_labels(z_sup, support.labels, z, ct, cfg.propagation).rows;
      for (std::size_t i = lo; i < hi; ++i) pred[order[i]] = rows.labels[i - lo];
    }
  }
  TrialResult tr;
  tr.confusion = ConfusionMatrix(ct);
  tr.scored = scored.size();
  if (prediction_map) prediction_map->assign(target.pixels(), 0);
  for (std::size_t i = 0; i < scored.size(); ++i) {
    if (pred[i] < 0) throw NumericError("evaluate: pixel " + std::to_string(scored[i]) + " received no label");
    tr.confusion.add(target.labels[scored[i]] - 1, static_cast<std::size_t>(pred[i]));
    if (prediction_map) (*prediction_map)[scored[i]] = static_cast<std::uint32_t>(pred[i] + 1);
  }
  tr.metrics = metrics(tr.confusion);
  tr.per_class = per_class_recall(tr.confusion);
  return tr;
}

// ---------------------------------------------------------------------------
// Reports

void summarize(RunReport& r) {
  const double n = static_cast<double>(r.trials.size());
  r.mean = {};
  r.stddev = {};
  if (r.trials.empty()) return;
  for (const auto& t : r.trials) {
    r.mean.oa += t.metrics.oa / n;
    r.mean.aa += t.metrics.aa / n;
    r.mean.kc += t.metrics.kc / n;
  }
  for (const auto& t : r.trials) {
    r.stddev.oa += (t.metrics.oa - r.mean.oa) * (t.metrics.oa - r.mean.oa) / n;
    r.stddev.aa += (t.metrics.aa - r.mean.aa) * (t.metrics.aa - r.mean.aa) / n;
    r.stddev.kc += (t.metrics.kc - r.mean.kc) * (t.metrics.kc - r.mean.kc) / n;
  }
  r.stddev.oa = std::sqrt(r.stddev.oa);
  r.stddev.aa = std::sqrt(r.stddev.aa);
  r.stddev.kc = std::sqrt(r.stddev.kc);
  const std::size_t classes = r.trials.front().per_class.size();
  r.per_class_mean.assign(classes, std::nullopt);
  for (std::size_t c = 0; c < classes; ++c) {
    double s = 0.0;
    std::size_t cnt = 0;
    for (const auto& t : r.trials) {
      if (t.per_class[c]) {
        s += *t.per_class[c];
        ++cnt;
      }
    }
    if (cnt) r.per_class_mean[c] = s / static_cast<double>(cnt);
  }
}

std::string report_text(const RunReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << "variant: " << r.variant << "\ntrials: " << r.trials.size() << "\n\n";
  os << "trial  seed                  OA(%)   AA(%)   KC(%)\n";
  for (std::size_t i = 0; i < r.trials.size(); ++i) {
    const auto& t = r.trials[i];
    os << i << "      " << t.seed << "  " << 100 * t.metrics.oa << "  " << 100 * t.metrics.aa << "  "
       << 100 * t.metrics.kc << "\n";
  }
  os << "\nOA " << 100 * r.mean.oa << " +- " << 100 * r.stddev.oa << "\n";
  os << "AA " << 100 * r.mean.aa << " +- " << 100 * r.stddev.aa << "\n";
  os << "KC " << 100 * r.mean.kc << " +- " << 100 * r.stddev.kc << "\n\nper-class accuracy (%)\n";
  for (std::size_t c = 0; c < r.per_class_mean.size(); ++c) {
    os << "  " << (c < r.class_names.size() ? r.class_names[c] : std::to_string(c + 1)) << ": ";
    if (r.per_class_mean[c]) {
      os << 100 * *r.per_class_mean[c];
    } else {
      os << "n/a";
    }
    os << "\n";
  }
  if (!r.schedule_path.empty()) os << "\nschedule trace: " << r.schedule_path << "\n";
  if (!r.checkpoint_path.empty()) os << "checkpoint: " << r.checkpoint_path << "\n";
  return os.str();
}

std::string report_kv(const RunReport& r) {
  std::ostringstream os;
  os << "variant=" << r.variant << "\n";
  os << "trials=" << r.trials.size() << "\n";
  for (std::size_t i = 0; i < r.trials.size(); ++i) {
    const auto& t = r.trials[i];
    const std::string p = "trial." + std::to_string(i) + ".";
    os << p << "seed=" << t.seed << "\n";
    os << p << "scored=" << t.scored << "\n";
    os << p << "oa=" << fmt(t.metrics.oa) << "\n";
    os << p << "aa=" << fmt(t.metrics.aa) << "\n";
    os << p << "kc=" << fmt(t.metrics.kc) << "\n";
    for (std::size_t c = 0; c < t.per_class.size(); ++c) {
      if (t.per_class[c]) os << p << "class." << c + 1 << ".accuracy=" << fmt(*t.per_class[c]) << "\n";
    }
  }
  os << "mean.oa=" << fmt(r.mean.oa) << "\nmean.aa=" << fmt(r.mean.aa) << "\nmean.kc=" << fmt(r.mean.kc) << "\n";
  os << "std.oa=" << fmt(r.stddev.oa) << "\nstd.aa=" << fmt(r.stddev.aa) << "\nstd.kc=" << fmt(r.stddev.kc) << "\n";
  for (std::size_t c = 0; c < r.per_class_mean.size(); ++c) {
    if (c < r.class_names.size()) os << "class." << c + 1 << ".name=" << r.class_names[c] << "\n";
    if (r.per_class_mean[c]) os << "class." << c + 1 << ".accuracy_mean=" << fmt(*r.per_class_mean[c]) << "\n";
  }
  if (!r.schedule_path.empty()) os << "schedule_trace=" << r.schedule_path << "\n";
  if (!r.checkpoint_path.empty()) os << "checkpoint=" << r.checkpoint_path << "\n";
  return os.str();
}

std::uint64_t trial_seed(const RunConfig& cfg, std::size_t trial) {
  return splitmix64(cfg.seed ^ (0x7472ull << 32) ^ trial);
}

IntermediateResult adapt_trial(const RunConfig& cfg, const EncoderParams& checkpoint, const Datasets& data,
                               std::size_t trial, bool smoothing) {
  Rng rng(trial_seed(cfg, trial));
  const TargetSupport support = sample_target_support(data.target, cfg.k_shot, rng);
  return run_intermediate_phase(cfg, checkpoint, data.source, data.target, support, smoothing, rng);
}

RunReport run_trials(const RunConfig& cfg, Variant variant, const Datasets& data, const EncoderParams& source_ckpt,
                     const ExperimentHooks& hooks) {
  cfg.validate();
  using clock = std::chrono::steady_clock;
  RunReport report;
  report.variant = variant_name(variant);
  report.class_names = data.target.class_names;
  const bool adapt = variant == Variant::Full || variant == Variant::NoSmoothing;
  const bool eval_smooth = variant == Variant::Full || variant == Variant::NoIntermediate;
  double t_adapt = 0.0, t_eval = 0.0;
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    const std::uint64_t seed = trial_seed(cfg, t);
    Rng rng(seed);
    const TargetSupport support = sample_target_support(data.target, cfg.k_shot, rng);
    EncoderParams params = source_ckpt;
    auto t0 = clock::now();
    if (adapt) {
      IntermediateResult ir =
          run_intermediate_phase(cfg, source_ckpt, data.source, data.target, support, variant == Variant::Full, rng);
      params = std::move(ir.params);
      if (t == 0) report.schedule = std::move(ir.schedule);
    }
    if (hooks.on_adapted) hooks.on_adapted(t, params);
    auto t1 = clock::now();
    std::vector<std::uint32_t> map;
    TrialResult tr = evaluate_support(cfg, params, data.target, support, eval_smooth, rng, t == 0 ? &map : nullptr);
    tr.seed = seed;
    if (t == 0 && hooks.on_prediction_map) hooks.on_prediction_map(map);
    auto t2 = clock::now();
    t_adapt += std::chrono::duration<double>(t1 - t0).count();
    t_eval += std::chrono::duration<double>(t2 - t1).count();
    report.trials.push_back(std::move(tr));
  }
  report.timings = {{"adapt", t_adapt}, {"evaluate", t_eval}};
  summarize(report);
  return report;
}

// ---------------------------------------------------------------------------
// Gradient check

EncoderConfig gradcheck_encoder_config() {
  EncoderConfig c;
  c.depth = 2;
  c.embed_dim = 16;
  c.heads = 2;
  c.mlp_dim = 32;
  c.patch_size = 1;
  c.spectral_tokens = 3;
  c.bands = 6;
  c.patch_radius = 1;
  return c;
}

GradcheckReport gradcheck(const GradcheckOptions& opt) {
  const EncoderConfig cfg = gradcheck_encoder_config();
  Rng rng(opt.seed);
  EncoderParams params = init_encoder(cfg, rng);
  // Move every parameter off its initial value so no group sits at a special
  // point (identity CP, unit gains, zero biases).
  params.for_each([&rng](const std::string&, Tensor& t, ParamRole) {
    std::vector<double> v = t.values();
    for (double& x : v) x += rng.normal(0.0, 0.1);
    t = Tensor(t.shape(), std::move(v));
  });
  params.set_phase(opt.all_groups ? TrainPhase::Warmup : TrainPhase::Adaptation);

  const std::size_t w = cfg.window();
  std::vector<double> px(4 * w * w * cfg.bands);
  for (double& v : px) v = rng.normal();
  const Tensor patches({4, w, w, cfg.bands}, std::move(px));
  const std::vector<int> sl{0, 1}, ql{0, 1};
  MixPlan plan;
  plan.first = {0};
  plan.second = {1};
  plan.lambdas = {0.3};
  const std::vector<std::size_t> sidx{0, 1}, qidx{2, 3};
  auto loss_of = [&](const EncoderParams& p) {
    const Tensor z = encode_batch(patches, p).z;
    return source_phase_loss(gather_rows(z, sidx), sl, gather_rows(z, qidx), ql, 2, plan).total;
  };

  Tape tape;
  ParamBinding bind(params, tape);
  const Gradients grads = tape.backward(loss_of(bind.bound()));
  std::map<std::string, std::size_t> ids(bind.watched().begin(), bind.watched().end());

  GradcheckReport rep;
  rep.threshold = opt.threshold;
  std::vector<std::string> names;
  params.for_each([&names](const std::string& name, Tensor&, ParamRole) { names.push_back(name); });
  for (const auto& name : names) {
    GradGroup g;
    g.name = name;
    auto it = ids.find(name);
    if (it == ids.end()) {
      g.skipped = true;
      rep.groups.push_back(g);
      continue;
    }
    std::vector<double> analytic = grads.of_id(it->second).values();
    if (opt.tamper) opt.tamper(name, analytic);
    std::vector<double> numeric(analytic.size());
    EncoderParams probe = params;
    Tensor* slot = nullptr;
    probe.for_each([&](const std::string& n2, Tensor& t, ParamRole) {
      if (n2 == name) slot = &t;
    });
    const Tensor base = *slot;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      std::vector<double> v = base.values();
      v[i] = base[i] + opt.step;
      *slot = Tensor(base.shape(), v);
      const double fp = loss_of(probe).item();
      v[i] = base[i] - opt.step;
      *slot = Tensor(base.shape(), v);
      const double fm = loss_of(probe).item();
      numeric[i] = (fp - fm) / (2.0 * opt.step);
    }
    g.rel_error = relative_error(analytic, numeric);
    rep.worst = std::max(rep.worst, g.rel_error);
    rep.groups.push_back(g);
  }
  rep.passed = rep.worst <= opt.threshold;
  return rep;
}

}  // namespace mifomo
