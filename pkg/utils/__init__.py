# Chart builders and small helpers shared by the CLI and the explorer pages.
