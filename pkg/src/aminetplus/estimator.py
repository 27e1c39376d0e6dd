"""scikit-learn style wrapper around the bag classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .bagdata import Bag, build_vocab, pad_batch, stratified_kfold
from .errors import ConfigError
from .milnet import ModelConfig, forward, init_params, save_checkpoint
from .trainer import TrainConfig, evaluate_scores, train
from .validation import check_bags, check_labels


class AMINetClassifier(ClassifierMixin, BaseEstimator):
    """Multi-instance classifier over bags of string tokens.

    ``X`` is a sequence of bags, each a sequence of tokens; ``y`` holds two
    classes.  Early stopping watches AUC on ``eval_set`` when given, otherwise
    on a stratified hold-out of ``validation_fraction`` of the training bags.

    Parameters mirror :class:`ModelConfig` and :class:`TrainConfig`;
    ``random_state`` seeds both initialization and shuffling.
    """

    def __init__(
        self,
        d_model=64,
        num_heads=4,
        fc_dims=(32, 16),
        instance_pooling_mode="self_adaptive",
        model_kind="ami_net_plus",
        loss="focal",
        alpha=0.25,
        gamma=2.0,
        learning_rate=0.001,
        batch_size=16,
        max_epochs=40,
        patience=20,
        validation_fraction=0.1,
        threshold=0.5,
        random_state=0,
    ):
        self.d_model = d_model
        self.num_heads = num_heads
        self.fc_dims = fc_dims
        self.instance_pooling_mode = instance_pooling_mode
        self.model_kind = model_kind
        self.loss = loss
        self.alpha = alpha
        self.gamma = gamma
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.random_state = random_state

    def _configs(self, vocab_size):
        seed = int(self.random_state or 0)
        mc = ModelConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            num_heads=self.num_heads,
            fc_dims=tuple(self.fc_dims),
            instance_pooling_mode=self.instance_pooling_mode,
            model_kind=self.model_kind,
            seed=seed,
        )
        tc = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            loss_kind=self.loss,
            alpha=self.alpha,
            gamma=self.gamma,
            early_stop_patience=self.patience,
            seed=seed,
        )
        return mc, tc

    def fit(self, X, y, eval_set=None):
        tokens = check_bags(X)
        self.classes_, labels = check_labels(y, len(tokens))
        bags = [Bag(f"x{i}", t, int(l)) for i, (t, l) in enumerate(zip(tokens, labels))]
        if eval_set is not None:
            Xv, yv = eval_set
            vtok = check_bags(Xv, "eval_set X")
            vcls, vlab = check_labels(yv, len(vtok), "eval_set y")
            if not np.array_equal(vcls, self.classes_):
                raise ConfigError("eval_set classes differ from the training classes")
            train_bags = bags
            val_bags = [Bag(f"v{i}", t, int(l)) for i, (t, l) in enumerate(zip(vtok, vlab))]
        else:
            if not 0 < self.validation_fraction < 1:
                raise ConfigError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
            k = max(2, int(round(1.0 / self.validation_fraction)))
            tr, va = stratified_kfold(bags, k, 1, int(self.random_state or 0))[0]
            train_bags = [bags[i] for i in tr]
            val_bags = [bags[i] for i in va]

        self.vocabulary_ = build_vocab(list(train_bags) + list(val_bags))
        self.model_config_, self.train_config_ = self._configs(len(self.vocabulary_))
        params = init_params(self.model_config_, self.model_config_.seed)
        self.params_, self.history_ = train(
            train_bags, val_bags, self.model_config_, self.train_config_, self.vocabulary_, params
        )
        return self

    def _bags(self, X):
        check_is_fitted(self, "params_")
        return [Bag(f"x{i}", t, 0) for i, t in enumerate(check_bags(X))]

    def predict_proba(self, X):
        """``(n_bags, 2)`` class probabilities, columns ordered as ``classes_``."""
        bags = self._bags(X)
        p = evaluate_scores(bags, self.params_, self.model_config_, self.vocabulary_, self.batch_size)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        p = self.predict_proba(X)[:, 1]
        return self.classes_[(p >= self.threshold).astype(int)]

    def decision_function(self, X):
        return self.predict_proba(X)[:, 1]

    def attention_weights(self, X) -> list:
        """Per-bag attention weight of every instance, in input order."""
        out = []
        for bag in self._bags(X):
            batch = pad_batch([self.vocabulary_.encode(bag)], [0], [bag.id])
            s = forward(batch, self.params_, self.model_config_).attention
            if s is None:
                raise ConfigError(f"model_kind {self.model_kind!r} has no attention weights")
            out.append(s.data[0].copy())
        return out

    def save(self, path):
        check_is_fitted(self, "params_")
        save_checkpoint(self.params_, self.model_config_, path, self.vocabulary_.tokens)
