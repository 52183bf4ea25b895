"""Pre-train on a small synthetic source domain, adapt, then compare with a random embedding."""

import torch

from fous.config import AdaptConfig, DataConfig, ModelConfig, RunConfig
from fous.data import generate_synthetic_domain_pair
from fous.evaluation import evaluate_person_search
from fous.model import build_networks
from fous.training import train_adaptation

cfg = RunConfig(
    data=DataConfig(source_scenes=40, target_scenes=40, source_identities=10, target_identities=10),
    model=ModelConfig(channels=16, embed_dim=32),
    adapt=AdaptConfig(pretrain_epochs=3, adapt_epochs=2, n_random=10),
).validate()

source, target = generate_synthetic_domain_pair(cfg.data, cfg.seed)
print("source persons:", sum(len(s.boxes) for s in source), "target persons:", sum(len(s.boxes) for s in target))


def show(state, record):
    if "phase" in record:
        print("pretrain %d  l_det %.3f  l_reid %.3f" % (record["epoch"], record["l_det"], record["l_reid"]))
    else:
        print("adapt %d  total %.2f  pseudo-acc %.3f  neighbours %.1f"
              % (record["epoch"], record["total"], record["pseudo_acc"], record["neighbors_t"]))


state = train_adaptation(cfg, source, target, on_epoch_end=show)

# same detections, two embeddings: the trained one and an untrained network
report = evaluate_person_search(state.net, target)
torch.manual_seed(123)
frozen, _ = build_networks(cfg)
baseline = evaluate_person_search(state.net, target, embed_net=frozen)
print("mAP %.3f  top-1 %.3f  (random embedding mAP %.3f)" % (report.map, report.top1, baseline.map))
print("detection AP %.3f  recall %.3f" % (report.det_ap, report.det_recall))
