# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
"""
from riskformer.models.base import ModelBase, load_checkpoint
from riskformer.util import CheckpointError, ConfigurationError, logger


class ModelManager:
    """
    Maintain the map of known model families.

    This is basically a singleton.
    """

    #: (dict) Currently known model classes by their script name,
    #: e.g. {'tr-la': TransformerModel, ...}
    #: (Call :func:`register_models()` to update this map after new model
    #: classes have been imported.)
    model_class_map = {}

    #: (bool) True when the stock model modules were imported and scanned
    models_registered = False

    @classmethod
    def _register_subclasses(cls, base_cls, cls_map):
        """Register all currently known subclasses of `base_cls` (recursively)."""
        for sub_cls in base_cls.__subclasses__():
            name = sub_cls.get_script_name()
            existing_cls = cls_map.get(name)
            if existing_cls is sub_cls:
                pass  # already registered
            elif existing_cls is None:
                if not name.startswith("_"):
                    cls_map[name] = sub_cls
            else:
                raise RuntimeError(f"Class name conflict: {sub_cls}")
            cls._register_subclasses(sub_cls, cls_map)
        return

    @classmethod
    def register_models(cls):
        if cls.models_registered:
            return
        cls.models_registered = True

        # Import stock class definitions, so we can scan the subclasses:
        import riskformer.models.conv  # noqa F401
        import riskformer.models.ffnn  # noqa F401
        import riskformer.models.transformer  # noqa F401

        cls._register_subclasses(ModelBase, cls.model_class_map)
        logger.debug(f"Registered models: {sorted(cls.model_class_map)}")
        return

    @classmethod
    def known_names(cls):
        cls.register_models()
        return sorted(cls.model_class_map)

    @classmethod
    def get_model_class(cls, name):
        """Return the model class for a script name like 'tr-la'.

        Raises:
            ConfigurationError: unknown name
        """
        cls.register_models()
        try:
            return cls.model_class_map[name]
        except KeyError:
            raise ConfigurationError(
                f"Unknown model {name!r}; expected one of {', '.join(cls.known_names())}"
            ) from None

    @classmethod
    def create_model(cls, name, model_cfg, seq_len, seed=0):
        """Return an untrained model built from the `model` config section."""
        model_cls = cls.get_model_class(name)
        model = model_cls.from_config(model_cfg, seq_len, seed=seed)
        logger.info(f"Created {model} (seq_len={seq_len}, seed={seed})")
        return model

    @classmethod
    def model_from_store(cls, store):
        """Re-create a trained model from a :class:`ParameterStore`.

        Raises:
            CheckpointError: if the metadata or parameter set do not fit
        """
        meta = store.metadata
        name = meta.get("model")
        spec_dict = meta.get("spec")
        if not name or not isinstance(spec_dict, dict):
            raise CheckpointError("Checkpoint metadata lacks 'model' or 'spec'")
        try:
            model_cls = cls.get_model_class(name)
        except ConfigurationError as e:
            raise CheckpointError(str(e)) from None

        spec_kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in spec_dict.items()}
        try:
            spec = model_cls.spec_cls(**spec_kwargs)
        except TypeError as e:
            raise CheckpointError(f"Checkpoint spec does not fit {name!r}: {e}") from None

        model = model_cls(spec, seed=meta.get("seed", 0))
        store.check_names(model.param_shapes().keys())
        store.check_shapes(model.param_shapes())
        model.set_params(store.params)
        return model

    @classmethod
    def load_model(cls, path):
        store = load_checkpoint(path)
        model = cls.model_from_store(store)
        logger.info(f"Loaded {model} from '{path}'")
        return model, store
