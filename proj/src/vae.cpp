namespace wf {}
