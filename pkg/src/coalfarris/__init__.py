"""Species-tree inference under the multispecies coalescent with Jukes-Cantor data.

Modules
-------
trees, newick   tree types, metrics, Newick and JSON I/O
msc             gene-tree sampling and the pairwise excess density
seqevo          Jukes-Cantor evolution, datasets and p-distances
reduction       topology-fixing windows, Delta estimates, stochastic Farris transform
triplet_test    quantile triplet test and min-p-distance baseline
reconstruct     per-triple pipeline and rooted-triple assembly
harness         seeded experiments, identifiability checks and reports
"""

from .msc import pairwise_excess_density, sample_gene_tree, sample_gene_trees
from .newick import parse_newick, serialize_newick
from .seqevo import SequenceDataset, distance_of_p, evolve_sequences, p_distances, p_of_distance
from .streams import Stream
from .trees import GeneTree, SpeciesPhylogeny, TripletTopology, species_metric

__version__ = "0.1.0"
