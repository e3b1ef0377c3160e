"""
Simple example using default settings wherever possible
"""

import ClinStream
from ClinStream.synth import sepsis_demo_protocol, synth_corpus

# the demonstration stay plus five random stays
corpus = synth_corpus(seed=0, n_stays=5)

# the one-rule sepsis protocol, already frozen
protocol = sepsis_demo_protocol()

# initialize the engine; the default backend is the scripted mock
engine = ClinStream.Engine(write_info=True)

# predict every bundle before its successor is read
report, traces = engine.evaluate(corpus, protocol, judge=engine.backend)

print(ClinStream.writeoutput.write_metrics({"ClinStream": report}))
print("Final actions of the first step = ", traces[0].final_actions)
