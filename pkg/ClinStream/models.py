"""
The user-facing engine: validated settings plus the two run phases
"""

# standard libraries
import logging

# internal modules
from . import check_inputs
from . import config
from . import writeoutput
from .agents import RiskVocabulary, StepConfig
from .backend import ChatBackend, make_backend
from .evaluate import prequential_run
from .reflector import phase1_run

logger = logging.getLogger(__name__)


class Engine:
    def __init__(
        self,
        backend=None,
        loop={},
        budgets={},
        ablation={},
        backend_params={},
        eval_params={},
        risk=None,
        template_dir=None,
        workers=config.numcores,
        write_info=False,
    ):
        """
        Holds the settings of the online loop and runs induction and evaluation

        Parameters
        ----------
        backend : ChatBackend, optional
            the chat backend; built from backend_params when omitted
        loop : dict, optional
            loop parameters, see config.loop_params
        budgets : dict, optional
            prompt budget allocations, see config.budget_params
        ablation : dict, optional
            component switches, see config.ablation_params
        backend_params : dict, optional
            backend settings, see config.backend_params
        eval_params : dict, optional
            recall cutoff and alias pairs, see config.eval_params
        risk : RiskVocabulary, optional
            defaults to the shipped vocabulary
        template_dir : str, optional
            directory of prompt templates (defaults to the shipped ones)
        workers : int, optional
            parallel trajectories
        write_info : bool, optional
            logs the engine settings on construction

        Attributes
        ----------
        settings : StepConfig
            the per-step configuration handed to the loop
        info : str
            Information about all the engine settings
        """

        self.budgets = budgets
        self.loop = loop
        self.ablation = ablation
        self.backend_params = backend_params
        self.eval_params = eval_params
        self.risk = risk if risk is not None else RiskVocabulary.load()
        self.template_dir = template_dir
        self.workers = workers
        self.backend = backend

        if write_info:
            logger.info(self.info)

    @classmethod
    def from_config(cls, run_config, backend=None, write_info=False):
        """
        Builds an engine from a checked RunConfig
        """

        return cls(
            backend=backend,
            loop=run_config.loop,
            budgets=run_config.budgets,
            ablation=run_config.ablation,
            backend_params=run_config.backend,
            eval_params=run_config.eval,
            risk=RiskVocabulary.load(run_config.paths["risk_vocab"]),
            template_dir=run_config.paths["templates"],
            workers=run_config.workers,
            write_info=write_info,
        )

    @property
    def budgets(self):
        return self._budgets

    @budgets.setter
    def budgets(self, budgets):
        self._budgets = check_inputs.check_budget_params(budgets)
        # the loop check depends on the buffer allocation
        try:
            self._loop = check_inputs.check_loop_params(self._loop, self._budgets["buffer"])
        except AttributeError:
            pass

    @property
    def loop(self):
        return self._loop

    @loop.setter
    def loop(self, loop):
        self._loop = check_inputs.check_loop_params(loop, self._budgets["buffer"])

    @property
    def ablation(self):
        return self._ablation

    @ablation.setter
    def ablation(self, ablation):
        self._ablation = check_inputs.check_ablation_params(ablation)

    @property
    def backend_params(self):
        return self._backend_params

    @backend_params.setter
    def backend_params(self, backend_params):
        self._backend_params = check_inputs.check_backend_params(backend_params)

    @property
    def eval_params(self):
        return self._eval_params

    @eval_params.setter
    def eval_params(self, eval_params):
        self._eval_params = check_inputs.check_eval_params(eval_params)

    @property
    def workers(self):
        return self._workers

    @workers.setter
    def workers(self, workers):
        self._workers = check_inputs._check_int(workers, "workers", 1)

    @property
    def backend(self):
        return self._backend

    @backend.setter
    def backend(self, backend):
        if backend is None:
            backend = make_backend(self._backend_params)
        elif not isinstance(backend, ChatBackend):
            raise check_inputs.ConfigInvalid("backend must be a ChatBackend")
        self._backend = backend

    @property
    def backend_name(self):
        return self._backend.name

    @property
    def settings(self):
        return StepConfig(
            loop=dict(self._loop),
            budgets=dict(self._budgets),
            ablation=dict(self._ablation),
            risk=self.risk,
            template_dir=self.template_dir,
            max_output_tokens=self._backend_params["max_output_tokens"],
            temperature=self._backend_params["temperature"],
        )

    @property
    def info(self):
        return writeoutput.write_engine_data(self)

    @writeoutput.timing
    def induce_protocol(self, corpus, seed_protocol=None):
        """
        Offline phase: grows a Global Protocol over a training corpus

        Parameters
        ----------
        corpus : list of SerializedStream
        seed_protocol : GlobalProtocol, optional

        Returns
        -------
        Phase1Result
            the frozen protocol with the induction log
        """

        return phase1_run(
            corpus,
            self._backend,
            self.settings,
            seed_protocol=seed_protocol,
            k=self._eval_params["k"],
            aliases=self._eval_params["aliases"],
            workers=self._workers,
        )

    @writeoutput.timing
    def evaluate(self, corpus, protocol, judge=None):
        """
        Online phase: prequential evaluation against a frozen protocol

        Parameters
        ----------
        corpus : list of SerializedStream
        protocol : GlobalProtocol
        judge : ChatBackend, optional
            backend scoring clinical equivalence

        Returns
        -------
        (MetricsReport, list of StepTrace)
        """

        return prequential_run(
            corpus,
            protocol,
            self._backend,
            self.settings,
            k=self._eval_params["k"],
            aliases=self._eval_params["aliases"],
            judge=judge,
            workers=self._workers,
        )
