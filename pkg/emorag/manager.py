import json, logging, os

from tqdm.auto import tqdm

from emorag.config import AblationFlags, RunConfig
from emorag.envsynth import generate_dataset, load_dataset
from emorag.pipeline.agents import PolicyBundle, init_bundle
from emorag.pipeline.retrieval import build_index
from emorag.pipeline.unified_pipeline import EmotionPipeline, PipelineOptions

logger = logging.getLogger(__name__)


class ProgressBarWrapper(object):

    class InternalTqdm(tqdm):
        def __init__(self, stop_event, iterable, **kwargs):
            self._stop_event = stop_event
            super().__init__(iterable, **kwargs)

        def __iter__(self):
            for x in super().__iter__():
                if self._stop_event and self._stop_event.is_set():
                    self.set_description("ABORTED")
                    break
                yield x

    def __init__(self, stop_event=None, disable=False, desc=None):
        self._stop_event = stop_event
        self._disable = disable
        self._desc = desc

    def __call__(self, iterable, desc=None):
        return ProgressBarWrapper.InternalTqdm(
            self._stop_event, iterable, disable=self._disable, desc=desc or self._desc
        )


class ExperimentManager(object):
    """Owns the loaded state of one run: config, dataset, evidence index and policy bundle."""

    def __init__(self, config: RunConfig, data_dir=None, stop_event=None, show_progress=True):
        self.config = config
        self.data_dir = data_dir
        self.stop_event = stop_event
        self.show_progress = show_progress

        self._dataset = None
        self._index = None
        self._bundle = None

    @property
    def output_dir(self):
        return self.config.output_dir

    def output_path(self, name):
        os.makedirs(self.output_dir, exist_ok=True)
        return os.path.join(self.output_dir, name)

    def write_json(self, name, data):
        path = self.output_path(name)
        with open(path, "w") as f:
            json.dump(data, f, sort_keys=True, indent=2)
            f.write("\n")
        return path

    @property
    def dataset(self):
        if self._dataset is None:
            if self.data_dir:
                logger.info(f"Loading dataset from {self.data_dir}")
                self._dataset = load_dataset(self.data_dir)
            else:
                logger.info(f"Generating dataset in memory from seed {self.config.synth_seed}")
                self._dataset = generate_dataset(self.config.synth, seed=self.config.synth_seed)
        return self._dataset

    @property
    def train(self):
        return self.dataset[0]

    @property
    def test(self):
        return self.dataset[1]

    @property
    def corpus(self):
        return self.dataset[2]

    @property
    def index(self):
        if self._index is None:
            self._index = build_index(self.corpus, self.config.synth.num_labels)
        return self._index

    @property
    def bundle(self) -> PolicyBundle:
        if self._bundle is None:
            self._bundle = init_bundle(self.config)
        return self._bundle

    @bundle.setter
    def bundle(self, bundle):
        self._bundle = bundle

    def pipeline(self, flags: AblationFlags = None, bundle: PolicyBundle = None) -> EmotionPipeline:
        return EmotionPipeline(bundle or self.bundle, self.index, PipelineOptions.from_config(self.config, flags))

    def progress(self, desc=None):
        return ProgressBarWrapper(stop_event=self.stop_event, disable=not self.show_progress, desc=desc)
