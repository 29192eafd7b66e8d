// End-to-end tour of the library on a small synthetic corpus: reader
// agreement, a short multi-task training run, test AUCs and an uncertainty
// band calibrated on the validation partition.

#include <algorithm>
#include <cstdio>

#include "cxrmt/agreement.hpp"
#include "cxrmt/band.hpp"
#include "cxrmt/metrics.hpp"
#include "cxrmt/synth.hpp"
#include "cxrmt/training.hpp"

using namespace cxrmt;

int main() {
  const auto corpus = generate_corpus(default_synthetic_spec(32, 240, 42));
  std::printf("corpus: %zu images, reader study over %zu cases\n", corpus.images.size(), corpus.readers.cases());

  std::printf("\n%-28s %6s %6s %6s %6s\n", "abnormality", "PPA", "NPA", "PD", "kappa");
  for (const auto& r : agreement_report(corpus.readers))
    std::printf("%-28s %6.3f %6.3f %6.3f %6.3f\n", r.abnormality.c_str(), r.ppa, r.npa, r.pd, r.kappa);

  const auto samples = corpus.samples();
  const auto plan = split_by_patient(samples, {0.6, 0.2, 0.2}, 42);
  const auto train_set = prepare_set(samples, plan.indices(Partition::train), 32);
  const auto val_set = prepare_set(samples, plan.indices(Partition::val), 32);
  const auto test_set = prepare_set(samples, plan.indices(Partition::test), 32);

  ModelConfig mcfg;
  mcfg.input_size = 32;
  mcfg.dense_block_sizes = {2, 2};
  TrainConfig tcfg;
  tcfg.batch_size = 16;
  tcfg.max_epochs = 4;
  Model model(mcfg);
  const auto result = train(model, train_set, val_set, tcfg);
  std::printf("\ntraining on %zu images\n", train_set.size());
  for (const auto& e : result.history)
    std::printf("epoch %zu  train %.3f  val %.3f  lr %g\n", e.epoch, e.train_loss, e.val_loss, e.lr);

  const auto tax = corpus.spec.taxonomy;
  const auto val = scored_set(val_set, predict_probabilities(model, val_set), tax);
  const auto test = scored_set(test_set, predict_probabilities(model, test_set), tax);
  const auto aucs = per_class_auc(test, 200, 0.05, 1);
  std::printf("\ntest mean AUC %.3f\n", mean_auc(aucs));

  std::printf("\n%-28s %7s %7s %9s %9s\n", "abnormality", "AUC", "banded", "retained", "of");
  for (std::size_t k = 0; k < test.classes.size(); ++k) {
    const auto v = std::find(val.classes.begin(), val.classes.end(), test.classes[k]) - val.classes.begin();
    if (v == std::ptrdiff_t(val.classes.size())) continue;
    BandParams p;
    try {
      p = calibrate_band(val.scores[v], val.labels[v]);
    } catch (const UndefinedMetricError&) {
      continue;
    }
    ScoredSet one;
    for (std::size_t i = 0; i < test.scores[k].size(); ++i)
      one.add(test.case_ids[k][i], test.classes[k], test.scores[k][i], test.labels[k][i]);
    const auto row = band_report(one, {p}, &corpus.readers).at(0);
    std::printf("%-28s %7.3f %7.3f %9zu %9zu\n", row.abnormality.c_str(), row.auc_full, row.auc_reduced, row.retained, row.total);
  }
  return 0;
}
